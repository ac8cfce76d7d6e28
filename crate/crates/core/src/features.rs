//! RFM aggregations and named design matrices.
//!
//! Logistic models cannot consume sequences, so each RFM channel is reduced
//! to fixed-width columns: the per-customer mean, the mean first difference,
//! and the last six months normalized by the mean of a reference quarter.

use std::collections::{HashMap, HashSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dataset::{location_scale, Panel, CHANNELS, CHANNEL_PREFIXES, MONTHS};
use crate::error::{ChurnError, Result};

pub const NORM_LAGS: usize = 6;
pub const DEFAULT_EPSILON: f64 = 1e-6;

pub fn agg_mean(series: &[f64]) -> Result<f64> {
    if series.is_empty() {
        return Err(ChurnError::InvalidInput("mean of an empty series".into()));
    }
    Ok(series.iter().sum::<f64>() / series.len() as f64)
}

/// Mean of the consecutive first differences, computed through the
/// telescoping sum as `(x_T - x_1) / (T - 1)`.
pub fn agg_mean_first_diff(series: &[f64]) -> Result<f64> {
    match series {
        [first, .., last] => Ok((last - first) / (series.len() - 1) as f64),
        _ => Err(ChurnError::InvalidInput(format!(
            "mean first difference needs at least 2 values, got {}",
            series.len()
        ))),
    }
}

/// Which quarter the normalized lags are divided by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuarterRule {
    /// Each month uses the calendar quarter before its own quarter
    /// (months 10-12 are divided by the mean of months 7-9).
    #[default]
    Preceding,
    /// All lags use the mean of the final quarter.
    Final,
}

impl std::str::FromStr for QuarterRule {
    type Err = ChurnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "preceding" => Ok(QuarterRule::Preceding),
            "final" => Ok(QuarterRule::Final),
            other => Err(ChurnError::InvalidConfig(format!(
                "unknown quarter rule `{other}` (expected preceding|final)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedLags {
    pub values: Vec<f64>,
    /// Set where the reference mean fell below epsilon and epsilon was used.
    pub guarded: Vec<bool>,
}

/// The last `n_lags` values divided by a quarterly mean (see [`QuarterRule`]).
/// The series length must be a multiple of three and leave room for the
/// reference quarter.
pub fn normalized_lagged(
    series: &[f64],
    n_lags: usize,
    epsilon: f64,
    rule: QuarterRule,
) -> Result<NormalizedLags> {
    let t_len = series.len();
    if !t_len.is_multiple_of(3) || n_lags == 0 || n_lags + 3 > t_len {
        return Err(ChurnError::InvalidInput(format!(
            "cannot take {n_lags} quarter-normalized lags of a length-{t_len} series"
        )));
    }
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(ChurnError::InvalidInput("epsilon must be positive".into()));
    }
    let quarter_mean = |q: usize| series[3 * q..3 * q + 3].iter().sum::<f64>() / 3.0;
    let mut values = Vec::with_capacity(n_lags);
    let mut guarded = Vec::with_capacity(n_lags);
    for (t, &x) in series.iter().enumerate().skip(t_len - n_lags) {
        let reference = match rule {
            QuarterRule::Preceding => quarter_mean(t / 3 - 1),
            QuarterRule::Final => quarter_mean(t_len / 3 - 1),
        };
        let guard = reference < epsilon;
        values.push(x / if guard { epsilon } else { reference });
        guarded.push(guard);
    }
    Ok(NormalizedLags { values, guarded })
}

/// Which column blocks a design matrix carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub use_static: bool,
    pub use_agg_rfm: bool,
    pub use_norm_lagged: bool,
    pub use_lstm_prob: bool,
}

impl FeatureSpec {
    pub fn is_empty(&self) -> bool {
        !(self.use_static || self.use_agg_rfm || self.use_norm_lagged || self.use_lstm_prob)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureOptions {
    pub quarter_rule: QuarterRule,
    pub epsilon: f64,
    /// Include the mean-first-difference column in the aggregate block.
    pub agg_first_diff: bool,
}

impl Default for FeatureOptions {
    fn default() -> Self {
        FeatureOptions {
            quarter_rule: QuarterRule::Preceding,
            epsilon: DEFAULT_EPSILON,
            agg_first_diff: true,
        }
    }
}

/// Row-per-customer numeric matrix with named columns (row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    ids: Vec<u64>,
    columns: Vec<String>,
    values: Vec<f64>,
    /// Lag cells whose reference quarter hit the epsilon guard.
    pub guarded_cells: usize,
}

impl FeatureMatrix {
    pub fn new(ids: Vec<u64>, columns: Vec<String>, values: Vec<f64>) -> Result<Self> {
        if values.len() != ids.len() * columns.len() {
            return Err(ChurnError::Dimension {
                expected: ids.len() * columns.len(),
                got: values.len(),
            });
        }
        let mut seen = HashSet::new();
        if let Some(dup) = columns.iter().find(|c| !seen.insert(c.as_str())) {
            return Err(ChurnError::InvalidInput(format!("duplicate column `{dup}`")));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            let id = ids[k / columns.len()];
            return Err(ChurnError::NonFinite(format!(
                "feature `{}` of customer {id}",
                columns[k % columns.len()]
            )));
        }
        Ok(FeatureMatrix {
            ids,
            columns,
            values,
            guarded_cells: 0,
        })
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn n_rows(&self) -> usize {
        self.ids.len()
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let p = self.n_cols();
        &self.values[i * p..(i + 1) * p]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> + Clone {
        (0..self.n_rows()).map(move |i| self.row(i))
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows().map(|r| r[j]).collect()
    }

    /// Rows whose id is in `keep`, in matrix order.
    pub fn select(&self, keep: &HashSet<u64>) -> FeatureMatrix {
        let mut ids = Vec::new();
        let mut values = Vec::new();
        for (id, row) in self.ids.iter().zip(self.rows()) {
            if keep.contains(id) {
                ids.push(*id);
                values.extend_from_slice(row);
            }
        }
        FeatureMatrix {
            ids,
            columns: self.columns.clone(),
            values,
            guarded_cells: 0,
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["id".to_string()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header)?;
        for (id, row) in self.ids.iter().zip(self.rows()) {
            let mut rec = vec![id.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| ChurnError::io("<writer>", e))?;
        Ok(())
    }
}

/// Column names in layout order for `spec`.
pub fn feature_columns(n_static: usize, spec: &FeatureSpec, opts: &FeatureOptions) -> Vec<String> {
    let mut cols = Vec::new();
    if spec.use_static {
        cols.extend((0..n_static).map(|j| format!("s{j}")));
    }
    if spec.use_agg_rfm {
        for prefix in CHANNEL_PREFIXES {
            cols.push(format!("{prefix}_mean"));
            if opts.agg_first_diff {
                cols.push(format!("{prefix}_mean_diff"));
            }
        }
    }
    if spec.use_norm_lagged {
        for prefix in CHANNEL_PREFIXES {
            cols.extend((MONTHS - NORM_LAGS + 1..=MONTHS).map(|t| format!("{prefix}_norm_{t}")));
        }
    }
    if spec.use_lstm_prob {
        cols.push("lstm_prob".to_string());
    }
    cols
}

/// Builds the design matrix for `spec` from a raw (unstandardized) panel.
///
/// Layout: static columns, then per channel `{mean, mean_diff}`, then per
/// channel six normalized lags, then the stacked LSTM probability.
pub fn build_feature_matrix(
    panel: &Panel,
    spec: &FeatureSpec,
    lstm_probs: Option<&HashMap<u64, f64>>,
    opts: &FeatureOptions,
) -> Result<FeatureMatrix> {
    if spec.is_empty() {
        return Err(ChurnError::InvalidConfig("feature spec selects no columns".into()));
    }
    let probs = match (spec.use_lstm_prob, lstm_probs) {
        (true, None) => {
            return Err(ChurnError::InvalidInput("spec needs LSTM probabilities but none were given".into()))
        }
        (true, Some(p)) => Some(p),
        (false, _) => None,
    };
    let columns = feature_columns(panel.n_static(), spec, opts);
    let mut values = Vec::with_capacity(panel.len() * columns.len());
    let mut guarded_cells = 0;
    for r in panel.records() {
        if spec.use_static {
            values.extend_from_slice(&r.static_features);
        }
        let channels: Vec<Vec<f64>> = (0..CHANNELS).map(|c| r.channel(c)).collect();
        if spec.use_agg_rfm {
            for series in &channels {
                values.push(agg_mean(series)?);
                if opts.agg_first_diff {
                    values.push(agg_mean_first_diff(series)?);
                }
            }
        }
        if spec.use_norm_lagged {
            for series in &channels {
                let lags = normalized_lagged(series, NORM_LAGS, opts.epsilon, opts.quarter_rule)?;
                guarded_cells += lags.guarded.iter().filter(|g| **g).count();
                values.extend(lags.values);
            }
        }
        if let Some(p) = probs {
            let prob = p.get(&r.id).ok_or_else(|| ChurnError::Record {
                id: r.id,
                message: "no LSTM probability for this customer".into(),
            })?;
            values.push(*prob);
        }
    }
    let mut m = FeatureMatrix::new(panel.ids(), columns, values)?;
    m.guarded_cells = guarded_cells;
    Ok(m)
}

/// Column-wise standardization of a design matrix. Fit on the training rows
/// before under-sampling; constant columns keep std 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnScaler {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    pub constant: Vec<bool>,
}

impl ColumnScaler {
    pub fn fit(x: &FeatureMatrix) -> Result<Self> {
        if x.n_rows() == 0 {
            return Err(ChurnError::InsufficientData("cannot fit a scaler on zero rows".into()));
        }
        let p = x.n_cols();
        let mut s = ColumnScaler {
            means: Vec::with_capacity(p),
            stds: Vec::with_capacity(p),
            constant: Vec::with_capacity(p),
        };
        for j in 0..p {
            let (m, sd, flat) = location_scale(x.rows().map(|r| r[j]));
            s.means.push(m);
            s.stds.push(sd);
            s.constant.push(flat);
        }
        Ok(s)
    }

    pub fn apply(&self, x: &FeatureMatrix) -> Result<FeatureMatrix> {
        if x.n_cols() != self.means.len() {
            return Err(ChurnError::Dimension {
                expected: self.means.len(),
                got: x.n_cols(),
            });
        }
        let values = x
            .rows()
            .flat_map(|row| {
                row.iter()
                    .zip(self.means.iter().zip(&self.stds))
                    .map(|(v, (m, s))| (v - m) / s)
            })
            .collect();
        Ok(FeatureMatrix {
            ids: x.ids.clone(),
            columns: x.columns.clone(),
            values,
            guarded_cells: x.guarded_cells,
        })
    }
}
