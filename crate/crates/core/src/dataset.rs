//! Customer panel: static features, 36-month RFM series and churn labels.
//!
//! Besides the data model this module owns everything that reshapes a panel
//! before modeling: the synthetic generator, CSV persistence, stratified fold
//! assignment, majority-class under-sampling and standardization.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ChurnError, Result};
use crate::seed;

/// Months of RFM history per customer, oldest first.
pub const MONTHS: usize = 36;
/// Recency, frequency, monetary value.
pub const CHANNELS: usize = 3;
/// Column prefixes used in CSV headers and feature names.
pub const CHANNEL_PREFIXES: [&str; CHANNELS] = ["r", "f", "m"];

pub const PANEL_VERSION_TAG: &str = "# churnlab-panel v1";

pub type RfmRow = [f64; CHANNELS];

#[derive(Debug, Clone, PartialEq)]
pub struct CustomerRecord {
    pub id: u64,
    pub static_features: Vec<f64>,
    /// One row per month, oldest first.
    pub rfm: Vec<RfmRow>,
    pub churned: bool,
}

impl CustomerRecord {
    /// Builds a raw record, checking the month count, the `[0,1]` range of
    /// static features and that RFM values are finite and non-negative.
    pub fn new(id: u64, static_features: Vec<f64>, rfm: Vec<RfmRow>, churned: bool) -> Result<Self> {
        let record = CustomerRecord {
            id,
            static_features,
            rfm,
            churned,
        };
        record.validate_raw()?;
        Ok(record)
    }

    fn validate_raw(&self) -> Result<()> {
        let fail = |message: String| ChurnError::Record {
            id: self.id,
            message,
        };
        if self.rfm.len() != MONTHS {
            return Err(fail(format!(
                "expected {MONTHS} RFM months, found {}",
                self.rfm.len()
            )));
        }
        if let Some((j, v)) = self
            .static_features
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(fail(format!("static feature s{j} = {v} is outside [0,1]")));
        }
        for (t, row) in self.rfm.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                if !v.is_finite() || *v < 0.0 {
                    return Err(fail(format!(
                        "{}_{} = {v} must be finite and non-negative",
                        CHANNEL_PREFIXES[c],
                        t + 1
                    )));
                }
            }
        }
        Ok(())
    }

    /// The series of one channel, oldest month first.
    pub fn channel(&self, channel: usize) -> Vec<f64> {
        self.rfm.iter().map(|row| row[channel]).collect()
    }
}

/// An ordered collection of customers sharing one static dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    records: Vec<CustomerRecord>,
    n_static: usize,
    /// Set by [`apply_standardizer`]; raw-value invariants no longer apply.
    standardized: bool,
}

impl Panel {
    /// Builds a raw panel. An empty record list needs `n_static` to fix the
    /// schema; otherwise it must agree with every record.
    pub fn new(records: Vec<CustomerRecord>, n_static: usize) -> Result<Self> {
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if !seen.insert(r.id) {
                return Err(ChurnError::Record {
                    id: r.id,
                    message: "duplicate id".into(),
                });
            }
            if r.static_features.len() != n_static {
                return Err(ChurnError::Record {
                    id: r.id,
                    message: format!(
                        "expected {n_static} static features, found {}",
                        r.static_features.len()
                    ),
                });
            }
            r.validate_raw()?;
        }
        Ok(Panel {
            records,
            n_static,
            standardized: false,
        })
    }

    pub fn records(&self) -> &[CustomerRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn n_static(&self) -> usize {
        self.n_static
    }

    pub fn months(&self) -> usize {
        MONTHS
    }

    pub fn is_standardized(&self) -> bool {
        self.standardized
    }

    pub fn static_names(&self) -> Vec<String> {
        (0..self.n_static).map(|j| format!("s{j}")).collect()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.records.iter().map(|r| r.id).collect()
    }

    pub fn labels(&self) -> Vec<bool> {
        self.records.iter().map(|r| r.churned).collect()
    }

    pub fn n_churners(&self) -> usize {
        self.records.iter().filter(|r| r.churned).count()
    }

    /// Churn prevalence; `NaN` for an empty panel.
    pub fn prevalence(&self) -> f64 {
        self.n_churners() as f64 / self.len() as f64
    }

    /// Records whose id is in `ids`, in panel order.
    pub fn subset(&self, ids: &HashSet<u64>) -> Panel {
        self.filter(|r| ids.contains(&r.id))
    }

    pub fn filter(&self, keep: impl Fn(&CustomerRecord) -> bool) -> Panel {
        Panel {
            records: self.records.iter().filter(|r| keep(r)).cloned().collect(),
            n_static: self.n_static,
            standardized: self.standardized,
        }
    }

    /// Fails unless both classes are present.
    pub fn require_both_classes(&self, what: &str) -> Result<()> {
        let c = self.n_churners();
        if c == 0 || c == self.len() {
            return Err(ChurnError::SingleClass(format!(
                "{what} has {c} churners out of {}",
                self.len()
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

/// Per-month relative drop of churner frequency/monetary value over the final
/// six months, per unit of `signal_strength`.
const CHURN_DECAY_PER_MONTH: f64 = 0.12;
/// Relative downward shift of churner recency, per unit of `signal_strength`.
const CHURN_RECENCY_SHIFT: f64 = 0.2;
const DECAY_WINDOW: usize = 6;
const SEASONAL_AMPLITUDE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_customers: usize,
    pub churn_rate: f64,
    pub n_static: usize,
    /// Leading static columns that enter the churn propensity.
    pub n_informative_static: usize,
    /// Logistic-link coefficient of the informative static columns.
    pub static_signal: f64,
    /// Strength of the churner RFM pattern; 0 makes sequences uninformative.
    pub signal_strength: f64,
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_customers: 10_000,
            churn_rate: 0.00243,
            n_static: 10,
            n_informative_static: 3,
            static_signal: 4.0,
            signal_strength: 1.0,
            noise_scale: 0.15,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ChurnError::InvalidConfig(m));
        if self.n_customers == 0 {
            return bad("n_customers must be positive".into());
        }
        if !(self.churn_rate > 0.0 && self.churn_rate < 1.0) {
            return bad(format!("churn_rate {} is outside (0,1)", self.churn_rate));
        }
        if self.n_informative_static > self.n_static {
            return bad("n_informative_static exceeds n_static".into());
        }
        if !self.signal_strength.is_finite() || self.signal_strength < 0.0 {
            return bad("signal_strength must be finite and >= 0".into());
        }
        if !self.noise_scale.is_finite() || self.noise_scale <= 0.0 {
            return bad("noise_scale must be finite and > 0".into());
        }
        if !self.static_signal.is_finite() {
            return bad("static_signal must be finite".into());
        }
        Ok(())
    }

    /// Realized churner count: `rate * n` rounded half-up.
    pub fn churner_count(&self) -> usize {
        round_half_up(self.churn_rate * self.n_customers as f64)
    }
}

pub(crate) fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

/// Generates a deterministic synthetic panel.
///
/// Churn labels come from a latent logistic propensity over the informative
/// static columns; exactly [`GeneratorConfig::churner_count`] customers with
/// the highest propensity churn. RFM channels are stationary positive
/// processes (customer base level, yearly ripple, multiplicative noise). For
/// churners, frequency and monetary value decay linearly over the final six
/// months and recency sits below the customer's base level, both scaled by
/// `signal_strength`.
pub fn generate_synthetic(config: &GeneratorConfig) -> Result<Panel> {
    config.validate()?;
    let n = config.n_customers;
    let mut rng = seed::rng(config.seed);

    let statics: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..config.n_static).map(|_| rng.random::<f64>()).collect())
        .collect();
    let propensity: Vec<f64> = statics
        .iter()
        .map(|s| {
            let linear: f64 = s[..config.n_informative_static].iter().map(|v| v - 0.5).sum();
            let u: f64 = rng.random_range(1e-12..1.0 - 1e-12);
            config.static_signal * linear + (u / (1.0 - u)).ln()
        })
        .collect();

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| propensity[b].total_cmp(&propensity[a]).then(a.cmp(&b)));
    let mut churned = vec![false; n];
    for &i in order.iter().take(config.churner_count()) {
        churned[i] = true;
    }

    let s = config.signal_strength;
    let mut records = Vec::with_capacity(n);
    for (i, static_features) in statics.into_iter().enumerate() {
        let z = |rng: &mut rand_chacha::ChaCha8Rng| rng.sample::<f64, _>(StandardNormal);
        let base = [
            3.0 * (0.3 * z(&mut rng)).exp(),
            8.0 * (0.4 * z(&mut rng)).exp(),
            500.0 * (0.5 * z(&mut rng)).exp(),
        ];
        let mut rfm = Vec::with_capacity(MONTHS);
        for t in 1..=MONTHS {
            let season = 1.0 + SEASONAL_AMPLITUDE * (2.0 * std::f64::consts::PI * t as f64 / 12.0).sin();
            let mut row = [0.0; CHANNELS];
            for (c, v) in row.iter_mut().enumerate() {
                let shock = (1.0 + config.noise_scale * z(&mut rng)).max(0.0);
                *v = base[c] * season * shock;
            }
            if churned[i] {
                row[0] *= (1.0 - CHURN_RECENCY_SHIFT * s).max(0.0);
                let into_window = (t + DECAY_WINDOW).saturating_sub(MONTHS);
                if into_window > 0 {
                    let decay = (1.0 - CHURN_DECAY_PER_MONTH * s * into_window as f64).max(0.0);
                    row[1] *= decay;
                    row[2] *= decay;
                }
            }
            rfm.push(row);
        }
        records.push(CustomerRecord {
            id: i as u64,
            static_features,
            rfm,
            churned: churned[i],
        });
    }
    Panel::new(records, config.n_static)
}

// ---------------------------------------------------------------------------
// CSV persistence
// ---------------------------------------------------------------------------

fn panel_header(n_static: usize) -> Vec<String> {
    let mut header = vec!["id".to_string(), "churned".to_string()];
    header.extend((0..n_static).map(|j| format!("s{j}")));
    for prefix in CHANNEL_PREFIXES {
        header.extend((1..=MONTHS).map(|t| format!("{prefix}_{t}")));
    }
    header
}

/// Writes the panel as versioned CSV. Floats use the shortest representation
/// that parses back to the same value.
pub fn write_csv<W: Write>(panel: &Panel, out: W) -> Result<()> {
    let mut out = out;
    writeln!(out, "{PANEL_VERSION_TAG}").map_err(|e| ChurnError::io("<writer>", e))?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(panel_header(panel.n_static))?;
    let mut row: Vec<String> = Vec::new();
    for r in &panel.records {
        row.clear();
        row.push(r.id.to_string());
        row.push(if r.churned { "1" } else { "0" }.to_string());
        row.extend(r.static_features.iter().map(|v| v.to_string()));
        for c in 0..CHANNELS {
            row.extend(r.rfm.iter().map(|m| m[c].to_string()));
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| ChurnError::io("<writer>", e))?;
    Ok(())
}

pub fn save_csv(panel: &Panel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| ChurnError::io(path, e))?;
    write_csv(panel, BufWriter::new(file))
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<Panel> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| ChurnError::io(path, e))?;
    read_csv(file, path)
}

/// Parses a panel; `source` only labels error messages.
pub fn read_csv<R: Read>(mut input: R, source: impl AsRef<Path>) -> Result<Panel> {
    let source = source.as_ref();
    let parse_err = |line: u64, message: String| ChurnError::Parse {
        path: source.to_path_buf(),
        line,
        message,
    };
    let mut text = String::new();
    input
        .read_to_string(&mut text)
        .map_err(|e| ChurnError::io(source, e))?;
    let (first, rest) = text.split_once('\n').unwrap_or((text.as_str(), ""));
    if first.trim_end() != PANEL_VERSION_TAG {
        return Err(parse_err(
            1,
            format!("expected version line `{PANEL_VERSION_TAG}`"),
        ));
    }

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(rest.as_bytes());
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let fixed = 2 + CHANNELS * MONTHS;
    if header.len() < fixed {
        return Err(parse_err(2, format!("header has {} columns, need at least {fixed}", header.len())));
    }
    let n_static = header.len() - fixed;
    let expected = panel_header(n_static);
    if let Some((got, want)) = header.iter().zip(&expected).find(|(a, b)| a != b) {
        return Err(parse_err(2, format!("unexpected column `{got}`, expected `{want}`")));
    }

    let mut records = Vec::new();
    for row in reader.records() {
        let row = row?;
        // +1 for the version line that was stripped before csv saw the text.
        let line = row.position().map_or(0, |p| p.line()) + 1;
        let field = |k: usize| row.get(k).unwrap_or("").trim();
        let id: u64 = field(0)
            .parse()
            .map_err(|_| parse_err(line, format!("bad id `{}`", field(0))))?;
        if row.len() != expected.len() {
            let months = row.len().saturating_sub(2 + n_static) as f64 / CHANNELS as f64;
            return Err(parse_err(
                line,
                format!(
                    "customer {id}: {} fields, expected {} ({MONTHS} RFM months per channel; row carries {months:.1})",
                    row.len(),
                    expected.len()
                ),
            ));
        }
        let churned = match field(1) {
            "0" => false,
            "1" => true,
            other => return Err(parse_err(line, format!("customer {id}: churned must be 0 or 1, got `{other}`"))),
        };
        let mut values = Vec::with_capacity(row.len() - 2);
        for (k, name) in expected.iter().enumerate().skip(2) {
            let v: f64 = field(k)
                .parse()
                .map_err(|_| parse_err(line, format!("customer {id}: column `{name}` is not a number")))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("customer {id}: column `{name}` is not finite")));
            }
            values.push(v);
        }
        let static_features = values[..n_static].to_vec();
        let rfm = (0..MONTHS)
            .map(|t| std::array::from_fn(|c| values[n_static + c * MONTHS + t]))
            .collect();
        let record = CustomerRecord::new(id, static_features, rfm, churned)
            .map_err(|e| parse_err(line, e.to_string()))?;
        records.push(record);
    }
    Panel::new(records, n_static)
}

// ---------------------------------------------------------------------------
// Folds and sampling
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    fold_of: BTreeMap<u64, usize>,
    k: usize,
}

impl FoldAssignment {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn fold_of(&self, id: u64) -> Option<usize> {
        self.fold_of.get(&id).copied()
    }

    pub fn assignments(&self) -> &BTreeMap<u64, usize> {
        &self.fold_of
    }

    pub fn fold_ids(&self, fold: usize) -> HashSet<u64> {
        self.fold_of
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(&id, _)| id)
            .collect()
    }

    /// `(training, held-out)` partitions for `fold`, each in panel order.
    pub fn split(&self, panel: &Panel, fold: usize) -> (Panel, Panel) {
        let train = panel.filter(|r| self.fold_of(r.id) != Some(fold));
        let test = panel.filter(|r| self.fold_of(r.id) == Some(fold));
        (train, test)
    }
}

/// Assigns each customer to one of `k` folds, dealing shuffled churners and
/// then shuffled non-churners round-robin so per-fold churner counts differ
/// by at most one and fold sizes stay balanced.
pub fn stratified_kfold(panel: &Panel, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(ChurnError::InvalidConfig(format!("fold count {k} < 2")));
    }
    let (mut pos, mut neg): (Vec<u64>, Vec<u64>) = (Vec::new(), Vec::new());
    for r in panel.records() {
        if r.churned {
            pos.push(r.id);
        } else {
            neg.push(r.id);
        }
    }
    if pos.len() < k || neg.len() < k {
        return Err(ChurnError::InsufficientData(format!(
            "{k} stratified folds need at least {k} churners and {k} non-churners, found {} and {}",
            pos.len(),
            neg.len()
        )));
    }
    let mut rng = seed::rng(seed);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let offset = pos.len();
    let fold_of = pos
        .iter()
        .enumerate()
        .chain(neg.iter().enumerate().map(|(j, id)| (j + offset, id)))
        .map(|(slot, &id)| (id, slot % k))
        .collect();
    Ok(FoldAssignment { fold_of, k })
}

/// Keeps every churner and `ratio` non-churners per churner, drawn without
/// replacement. Output keeps panel order.
pub fn undersample(panel: &Panel, ratio: usize, seed: u64) -> Result<Panel> {
    if ratio < 1 {
        return Err(ChurnError::InvalidConfig("under-sampling ratio must be >= 1".into()));
    }
    let negatives: Vec<u64> = panel.records().iter().filter(|r| !r.churned).map(|r| r.id).collect();
    let wanted = ratio * panel.n_churners();
    if negatives.len() < wanted {
        return Err(ChurnError::InsufficientData(format!(
            "under-sampling at 1:{ratio} needs {wanted} non-churners, found {}",
            negatives.len()
        )));
    }
    let mut rng = seed::rng(seed);
    let keep: HashSet<u64> = index::sample(&mut rng, negatives.len(), wanted)
        .into_iter()
        .map(|j| negatives[j])
        .collect();
    Ok(panel.filter(|r| r.churned || keep.contains(&r.id)))
}

// ---------------------------------------------------------------------------
// Standardization
// ---------------------------------------------------------------------------

/// Per-column static and per-channel RFM location/scale. RFM channels are
/// pooled over customers and months, which keeps each customer's temporal
/// shape intact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub static_means: Vec<f64>,
    pub static_stds: Vec<f64>,
    pub rfm_means: [f64; CHANNELS],
    pub rfm_stds: [f64; CHANNELS],
    /// Static columns that were constant in the fitting data (std forced to 1).
    pub constant_static: Vec<bool>,
    pub constant_rfm: [bool; CHANNELS],
}

/// Mean and population std of `values`. Constant inputs return the common
/// value as mean, std 1, and the flag set, so they standardize to exact zeros.
pub(crate) fn location_scale(values: impl Iterator<Item = f64> + Clone) -> (f64, f64, bool) {
    let (mut n, mut sum, mut lo, mut hi) = (0usize, 0.0, f64::INFINITY, f64::NEG_INFINITY);
    for v in values.clone() {
        n += 1;
        sum += v;
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if n == 0 || lo == hi {
        return (if n == 0 { 0.0 } else { lo }, 1.0, true);
    }
    let mean = sum / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    if std > 0.0 {
        (mean, std, false)
    } else {
        (mean, 1.0, true)
    }
}

pub fn fit_standardizer(panel: &Panel) -> Result<Standardizer> {
    if panel.is_empty() {
        return Err(ChurnError::InsufficientData("cannot fit a standardizer on an empty panel".into()));
    }
    let p = panel.n_static();
    let mut s = Standardizer {
        static_means: vec![0.0; p],
        static_stds: vec![1.0; p],
        rfm_means: [0.0; CHANNELS],
        rfm_stds: [1.0; CHANNELS],
        constant_static: vec![false; p],
        constant_rfm: [false; CHANNELS],
    };
    for j in 0..p {
        let (m, sd, flat) = location_scale(panel.records().iter().map(|r| r.static_features[j]));
        s.static_means[j] = m;
        s.static_stds[j] = sd;
        s.constant_static[j] = flat;
    }
    for c in 0..CHANNELS {
        let (m, sd, flat) =
            location_scale(panel.records().iter().flat_map(|r| r.rfm.iter().map(move |row| row[c])));
        s.rfm_means[c] = m;
        s.rfm_stds[c] = sd;
        s.constant_rfm[c] = flat;
    }
    Ok(s)
}

pub fn apply_standardizer(std: &Standardizer, panel: &Panel) -> Result<Panel> {
    if std.static_means.len() != panel.n_static() {
        return Err(ChurnError::Dimension {
            expected: std.static_means.len(),
            got: panel.n_static(),
        });
    }
    let records = panel
        .records()
        .iter()
        .map(|r| CustomerRecord {
            id: r.id,
            static_features: r
                .static_features
                .iter()
                .zip(std.static_means.iter().zip(&std.static_stds))
                .map(|(v, (m, s))| (v - m) / s)
                .collect(),
            rfm: r
                .rfm
                .iter()
                .map(|row| std::array::from_fn(|c| (row[c] - std.rfm_means[c]) / std.rfm_stds[c]))
                .collect(),
            churned: r.churned,
        })
        .collect();
    Ok(Panel {
        records,
        n_static: panel.n_static(),
        standardized: true,
    })
}
