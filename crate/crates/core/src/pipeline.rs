//! Nested cross-validation over the nine-row model matrix.
//!
//! Each outer fold tunes every model on its inner folds by mean validation
//! AUC, refits on the outer-training split and scores the untouched outer
//! test fold. Under-sampling only ever touches training splits, and every
//! standardizer is fit on the training split before under-sampling.
//!
//! Stacked specs add an LSTM churn probability column. Training rows get
//! out-of-fold probabilities from `stack_k` sub-models; prediction rows get
//! probabilities from one LSTM trained on the whole training split. Every
//! fitted model is recorded in an [`AuditLog`] with the ids it was trained
//! on and the ids it predicted, and the run fails if the two ever overlap.
//!
//! Child seeds are `seed::derive(master, [stage, outer, inner, stack])`,
//! with `u64::MAX` standing in for "not inside an inner/stack fold". The
//! LSTM seed does not depend on the grid point, so the model behind a
//! tuning score and the one reused for stacking are the same fit.

use std::collections::btree_map::Entry;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::dataset::{apply_standardizer, fit_standardizer, stratified_kfold, undersample, FoldAssignment, Panel};
use crate::error::{ChurnError, Result};
use crate::exec::Execution;
use crate::features::{build_feature_matrix, ColumnScaler, FeatureMatrix, FeatureOptions, FeatureSpec};
use crate::logit::{fit_l1_logistic, predict_proba, LogitOptions, C_GRID};
use crate::lstm::{predict_panel, train_lstm, LstmHyper, BATCH_GRID, EPOCH_GRID, HIDDEN_GRID, LEARNING_RATE};
use crate::metrics::{auc, evaluate, EmpcParams, MetricReport};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    /// L1 logistic regression on the given column blocks.
    Logistic(FeatureSpec),
    /// LSTM on the raw RFM sequences.
    Lstm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelSpec {
    /// Short name used on the command line.
    pub key: &'static str,
    /// Row label in the report.
    pub name: &'static str,
    pub kind: ModelKind,
}

impl ModelSpec {
    pub fn uses_lstm(&self) -> bool {
        match self.kind {
            ModelKind::Logistic(f) => f.use_lstm_prob,
            ModelKind::Lstm => true,
        }
    }

    pub fn is_stacked(&self) -> bool {
        matches!(self.kind, ModelKind::Logistic(f) if f.use_lstm_prob)
    }
}

const fn logistic(key: &'static str, name: &'static str, agg: bool, lagged: bool, lstm: bool) -> ModelSpec {
    ModelSpec {
        key,
        name,
        kind: ModelKind::Logistic(FeatureSpec {
            use_static: true,
            use_agg_rfm: agg,
            use_norm_lagged: lagged,
            use_lstm_prob: lstm,
        }),
    }
}

/// The model matrix in report order.
pub const MODEL_SPECS: [ModelSpec; 9] = [
    logistic("static", "Only static", false, false, false),
    logistic("static+agg", "Static + agg. RFM", true, false, false),
    logistic("static+lagged", "Static + norm. lagged RFM", false, true, false),
    logistic("static+agg+lagged", "Static + agg. RFM + norm. lagged RFM", true, true, false),
    logistic("static+lstm", "Static + LSTM prob.", false, false, true),
    logistic("static+lstm+lagged", "Static + LSTM prob. + norm. lagged RFM", false, true, true),
    logistic("static+lstm+agg", "Static + LSTM prob. + agg. RFM", true, false, true),
    logistic(
        "static+lstm+agg+lagged",
        "Static + LSTM prob. + agg. RFM + norm. lagged RFM",
        true,
        true,
        true,
    ),
    ModelSpec {
        key: "lstm",
        name: "LSTM Neural network",
        kind: ModelKind::Lstm,
    },
];

pub fn spec_by_key(key: &str) -> Result<ModelSpec> {
    MODEL_SPECS.iter().find(|s| s.key == key).copied().ok_or_else(|| {
        let known: Vec<&str> = MODEL_SPECS.iter().map(|s| s.key).collect();
        ChurnError::InvalidConfig(format!("unknown model `{key}`; expected one of {}", known.join(", ")))
    })
}

/// Specs selected by key, in report order. An empty selection means all.
pub fn resolve_specs(keys: &[String]) -> Result<Vec<ModelSpec>> {
    if keys.is_empty() {
        return Ok(MODEL_SPECS.to_vec());
    }
    let mut wanted = HashSet::new();
    for k in keys {
        let spec = spec_by_key(k)?;
        if !wanted.insert(spec.key) {
            return Err(ChurnError::InvalidConfig(format!("model `{k}` listed twice")));
        }
    }
    Ok(MODEL_SPECS.iter().filter(|s| wanted.contains(s.key)).copied().collect())
}

/// One LSTM grid point (everything but the seed).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LstmPoint {
    pub hidden_units: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl LstmPoint {
    pub fn hyper(&self, seed: u64) -> LstmHyper {
        LstmHyper {
            hidden_units: self.hidden_units,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
        }
    }
}

impl fmt::Display for LstmPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "hidden={} epochs={} batch={} lr={}",
            self.hidden_units, self.epochs, self.batch_size, self.learning_rate
        )
    }
}

/// A point of a model's hyperparameter grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Hyper {
    Logistic { c: f64 },
    Lstm(LstmPoint),
}

impl fmt::Display for Hyper {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Hyper::Logistic { c } => write!(f, "C={c}"),
            Hyper::Lstm(p) => p.fmt(f),
        }
    }
}

/// Hyperparameter grids. Enumeration order (and therefore tie-breaking) is
/// `c` in listed order for the logistic models and hidden units, epochs,
/// batch size, learning rate (outermost first) for the LSTM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchGrid {
    pub c: Vec<f64>,
    pub hidden_units: Vec<usize>,
    pub epochs: Vec<usize>,
    pub batch_size: Vec<usize>,
    pub learning_rate: Vec<f64>,
}

impl Default for SearchGrid {
    fn default() -> Self {
        SearchGrid::full()
    }
}

impl SearchGrid {
    /// The full grids (8 C values, 80 LSTM points).
    pub fn full() -> Self {
        SearchGrid {
            c: C_GRID.to_vec(),
            hidden_units: HIDDEN_GRID.to_vec(),
            epochs: EPOCH_GRID.to_vec(),
            batch_size: BATCH_GRID.to_vec(),
            learning_rate: vec![LEARNING_RATE],
        }
    }

    /// Reduced LSTM grid for desk-scale runs; the logistic grid stays full.
    pub fn smoke() -> Self {
        SearchGrid {
            hidden_units: vec![5, 10],
            epochs: vec![25],
            batch_size: vec![10],
            ..SearchGrid::full()
        }
    }

    pub fn lstm_points(&self) -> Vec<LstmPoint> {
        let mut points = Vec::new();
        for &hidden_units in &self.hidden_units {
            for &epochs in &self.epochs {
                for &batch_size in &self.batch_size {
                    for &learning_rate in &self.learning_rate {
                        points.push(LstmPoint {
                            hidden_units,
                            epochs,
                            batch_size,
                            learning_rate,
                        });
                    }
                }
            }
        }
        points
    }

    pub fn points(&self, spec: &ModelSpec) -> Vec<Hyper> {
        match spec.kind {
            ModelKind::Logistic(_) => self.c.iter().map(|&c| Hyper::Logistic { c }).collect(),
            ModelKind::Lstm => self.lstm_points().into_iter().map(Hyper::Lstm).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(ChurnError::InvalidConfig(format!("grid `{what}` is empty or invalid")));
        if self.c.is_empty() || self.c.iter().any(|c| !(c.is_finite() && *c > 0.0)) {
            return bad("c");
        }
        if self.hidden_units.is_empty() || self.hidden_units.contains(&0) {
            return bad("hidden_units");
        }
        if self.epochs.is_empty() || self.epochs.contains(&0) {
            return bad("epochs");
        }
        if self.batch_size.is_empty() || self.batch_size.contains(&0) {
            return bad("batch_size");
        }
        if self.learning_rate.is_empty() || self.learning_rate.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return bad("learning_rate");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvConfig {
    pub outer_k: usize,
    pub inner_k: usize,
    /// Folds used to produce out-of-fold LSTM probabilities.
    pub stack_k: usize,
    /// Non-churners kept per churner in every training split.
    pub undersample_ratio: usize,
    pub master_seed: u64,
    pub execution: Execution,
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig {
            outer_k: 3,
            inner_k: 4,
            stack_k: 4,
            undersample_ratio: 2,
            master_seed: 0,
            execution: Execution::default(),
        }
    }
}

impl CvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.outer_k < 2 || self.inner_k < 2 || self.stack_k < 2 {
            return Err(ChurnError::InvalidConfig("fold counts must be at least 2".into()));
        }
        if self.undersample_ratio < 1 {
            return Err(ChurnError::InvalidConfig("undersample_ratio must be at least 1".into()));
        }
        Ok(())
    }
}

/// Everything needed to reproduce a run. Serialized as TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub panel: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    /// Model keys to run; empty means all nine.
    pub specs: Vec<String>,
    pub cv: CvConfig,
    pub grid: SearchGrid,
    pub empc: EmpcParams,
    pub logit: LogitOptions,
    pub features: FeatureOptions,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| ChurnError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| e.context(path.display().to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.cv.validate()?;
        self.grid.validate()?;
        self.empc.validate()?;
        resolve_specs(&self.specs)?;
        if self.logit.tol.is_nan() || self.logit.tol <= 0.0 || self.logit.max_iter == 0 {
            return Err(ChurnError::InvalidConfig("logit options must be positive".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Hyperparameter selection across outer folds
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionRule {
    /// Some set was chosen by more than one outer fold.
    Majority,
    /// All outer folds chose different sets.
    BestAuc,
}

impl fmt::Display for SelectionRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectionRule::Majority => "majority",
            SelectionRule::BestAuc => "best-AUC",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub hyper: Hyper,
    pub rule: SelectionRule,
}

/// Picks the hyperparameter set to report from the per-outer-fold choices
/// and their outer AUCs: the most frequent set (ties go to the higher mean
/// AUC, then to the earlier fold), or the best-AUC set if none repeats.
pub fn select_reported_model(chosen: &[Hyper], aucs: &[f64]) -> Result<Selection> {
    if chosen.is_empty() || chosen.len() != aucs.len() {
        return Err(ChurnError::InvalidInput(format!(
            "{} chosen sets with {} AUCs",
            chosen.len(),
            aucs.len()
        )));
    }
    // (first fold, count, AUC sum) per distinct set, in first-seen order.
    let mut groups: Vec<(usize, usize, f64)> = Vec::new();
    for (i, h) in chosen.iter().enumerate() {
        match groups.iter_mut().find(|g| chosen[g.0] == *h) {
            Some(g) => {
                g.1 += 1;
                g.2 += aucs[i];
            }
            None => groups.push((i, 1, aucs[i])),
        }
    }
    let top = groups.iter().map(|g| g.1).max().unwrap_or(0);
    let rule = if top > 1 {
        SelectionRule::Majority
    } else {
        SelectionRule::BestAuc
    };
    let mut best: Option<(usize, f64)> = None;
    for g in groups.iter().filter(|g| g.1 == top) {
        let mean = g.2 / g.1 as f64;
        if best.is_none_or(|(_, b)| mean > b) {
            best = Some((g.0, mean));
        }
    }
    let (fold, _) = best.expect("at least one group");
    Ok(Selection {
        hyper: chosen[fold],
        rule,
    })
}

/// Relative improvement `(a - b) / b`.
pub fn improvement_ratio(a: f64, b: f64) -> f64 {
    (a - b) / b
}

// ---------------------------------------------------------------------------
// Audit log
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub model: String,
    pub outer_fold: usize,
    /// Sorted ids of the rows the model was fit on.
    pub trained_on: Vec<u64>,
    /// Sorted ids of the rows it scored.
    pub predicted: Vec<u64>,
}

impl AuditEntry {
    /// First predicted id that is also a training id.
    pub fn first_overlap(&self) -> Option<u64> {
        self.predicted.iter().copied().find(|id| self.trained_on.binary_search(id).is_ok())
    }
}

/// Thread-safe record of every fitted model that produced predictions.
#[derive(Debug, Default)]
pub struct AuditLog {
    entries: Mutex<Vec<AuditEntry>>,
}

impl AuditLog {
    pub fn record(&self, model: String, outer_fold: usize, trained_on: &[u64], predicted: &[u64]) {
        let mut trained_on = trained_on.to_vec();
        let mut predicted = predicted.to_vec();
        trained_on.sort_unstable();
        predicted.sort_unstable();
        self.entries.lock().expect("audit lock").push(AuditEntry {
            model,
            outer_fold,
            trained_on,
            predicted,
        });
    }

    /// Entries sorted by fold then model name, independent of scheduling.
    pub fn entries(&self) -> Vec<AuditEntry> {
        let mut e = self.entries.lock().expect("audit lock").clone();
        e.sort_by(|a, b| (a.outer_fold, &a.model).cmp(&(b.outer_fold, &b.model)));
        e
    }
}

/// Checks that no model predicted a customer it was trained on, and that no
/// model of an outer fold was trained on that fold's test customers.
pub fn verify_audit(entries: &[AuditEntry], outer_test: &[HashSet<u64>]) -> Result<()> {
    for e in entries {
        if let Some(id) = e.first_overlap() {
            return Err(ChurnError::Leakage { model: e.model.clone(), id });
        }
        if let Some(test) = outer_test.get(e.outer_fold) {
            if let Some(&id) = e.trained_on.iter().find(|id| test.contains(id)) {
                return Err(ChurnError::Leakage {
                    model: format!("{} (trained on outer test fold)", e.model),
                    id,
                });
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Training/prediction primitives
// ---------------------------------------------------------------------------

const STAGE_OUTER_FOLDS: u64 = 1;
const STAGE_INNER_FOLDS: u64 = 2;
const STAGE_STACK_FOLDS: u64 = 3;
const STAGE_UNDERSAMPLE: u64 = 4;
const STAGE_LSTM: u64 = 5;
const NONE: u64 = u64::MAX;

/// Where a training split sits in the nested fold structure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Scope {
    pub outer: usize,
    pub inner: Option<usize>,
    pub stack: Option<usize>,
}

impl Scope {
    pub fn outer(outer: usize) -> Self {
        Scope {
            outer,
            inner: None,
            stack: None,
        }
    }

    pub fn inner(outer: usize, inner: usize) -> Self {
        Scope {
            outer,
            inner: Some(inner),
            stack: None,
        }
    }

    fn with_stack(self, s: usize) -> Self {
        Scope { stack: Some(s), ..self }
    }

    fn seed(&self, master: u64, stage: u64) -> u64 {
        let part = |v: Option<usize>| v.map_or(NONE, |x| x as u64);
        seed::derive(master, &[stage, self.outer as u64, part(self.inner), part(self.stack)])
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "o{}", self.outer)?;
        if let Some(i) = self.inner {
            write!(f, "/i{i}")?;
        }
        if let Some(s) = self.stack {
            write!(f, "/s{s}")?;
        }
        Ok(())
    }
}

/// Holds the configuration, the audit log and a cache of LSTM predictions
/// keyed by (scope, grid point).
pub struct Session<'a> {
    config: &'a ExperimentConfig,
    audit: AuditLog,
    lstm_cache: Mutex<HashMap<String, Arc<HashMap<u64, f64>>>>,
}

/// Inner-CV outcome for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub candidates: Vec<Hyper>,
    /// Mean validation AUC per candidate.
    pub mean_aucs: Vec<f64>,
    /// First candidate with the highest mean AUC.
    pub best_index: usize,
}

impl TuneResult {
    pub fn best(&self) -> Hyper {
        self.candidates[self.best_index]
    }

    fn from_scores(candidates: Vec<Hyper>, per_fold: Vec<Vec<f64>>) -> Self {
        let k = per_fold.len() as f64;
        let mean_aucs: Vec<f64> = (0..candidates.len())
            .map(|g| per_fold.iter().map(|f| f[g]).sum::<f64>() / k)
            .collect();
        let mut best_index = 0;
        for (g, &a) in mean_aucs.iter().enumerate() {
            if a > mean_aucs[best_index] {
                best_index = g;
            }
        }
        TuneResult {
            candidates,
            mean_aucs,
            best_index,
        }
    }
}

fn aligned(ids: &[u64], scores: &HashMap<u64, f64>) -> Vec<f64> {
    ids.iter().map(|id| scores[id]).collect()
}

impl<'a> Session<'a> {
    pub fn new(config: &'a ExperimentConfig) -> Result<Self> {
        config.validate()?;
        Ok(Session {
            config,
            audit: AuditLog::default(),
            lstm_cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        self.config
    }

    pub fn audit(&self) -> &AuditLog {
        &self.audit
    }

    fn cv(&self) -> &CvConfig {
        &self.config.cv
    }

    fn exec(&self) -> Execution {
        self.config.cv.execution
    }

    fn undersample(&self, train: &Panel, scope: Scope) -> Result<Panel> {
        undersample(
            train,
            self.cv().undersample_ratio,
            scope.seed(self.cv().master_seed, STAGE_UNDERSAMPLE),
        )
    }

    pub fn outer_folds(&self, panel: &Panel) -> Result<FoldAssignment> {
        stratified_kfold(
            panel,
            self.cv().outer_k,
            seed::derive(self.cv().master_seed, &[STAGE_OUTER_FOLDS]),
        )
    }

    pub fn inner_folds(&self, train: &Panel, outer: usize) -> Result<FoldAssignment> {
        stratified_kfold(
            train,
            self.cv().inner_k,
            seed::derive(self.cv().master_seed, &[STAGE_INNER_FOLDS, outer as u64]),
        )
    }

    /// Standardizes RFM on `train` (before under-sampling), trains an LSTM
    /// on the under-sampled split and scores `predict`. Results are cached
    /// per (scope, point), so repeated requests reuse one fit.
    pub fn lstm_scores(
        &self,
        train: &Panel,
        predict: &Panel,
        point: LstmPoint,
        scope: Scope,
    ) -> Result<Arc<HashMap<u64, f64>>> {
        let key = format!("lstm {scope} {point}");
        if let Some(hit) = self.lstm_cache.lock().expect("cache lock").get(&key) {
            return Ok(Arc::clone(hit));
        }
        let std = fit_standardizer(train)?;
        let fit_set = self.undersample(&apply_standardizer(&std, train)?, scope)?;
        fit_set.require_both_classes(&key)?;
        let seqs: Vec<_> = fit_set.records().iter().map(|r| r.rfm.clone()).collect();
        let hyper = point.hyper(scope.seed(self.cv().master_seed, STAGE_LSTM));
        let model = train_lstm(&seqs, &fit_set.labels(), &hyper).map_err(|e| e.context(key.clone()))?;
        let target = apply_standardizer(&std, predict)?;
        let probs = predict_panel(&model, &target, Execution::Sequential);
        let scores: HashMap<u64, f64> = predict.ids().into_iter().zip(probs).collect();

        let mut cache = self.lstm_cache.lock().expect("cache lock");
        if let Some(hit) = cache.get(&key) {
            return Ok(Arc::clone(hit));
        }
        self.audit.record(key.clone(), scope.outer, &fit_set.ids(), &predict.ids());
        let scores = Arc::new(scores);
        cache.insert(key, Arc::clone(&scores));
        Ok(scores)
    }

    /// Out-of-fold LSTM probabilities for every id of `train`: each fold of
    /// a `stack_k`-fold split is scored by an LSTM fit on the other folds.
    pub fn oof_lstm_probabilities(&self, train: &Panel, point: LstmPoint, scope: Scope) -> Result<HashMap<u64, f64>> {
        let inner = scope.inner.map_or(NONE, |i| i as u64);
        let folds = stratified_kfold(
            train,
            self.cv().stack_k,
            seed::derive(
                self.cv().master_seed,
                &[STAGE_STACK_FOLDS, scope.outer as u64, inner],
            ),
        )
        .map_err(|e| e.context(format!("stacking folds at {scope}")))?;
        let parts = self.exec().try_map_range(folds.k(), |s| {
            let (fit, held_out) = folds.split(train, s);
            self.lstm_scores(&fit, &held_out, point, scope.with_stack(s))
        })?;
        let mut out = HashMap::with_capacity(train.len());
        for part in parts {
            for (&id, &p) in part.iter() {
                if out.insert(id, p).is_some() {
                    return Err(ChurnError::Record {
                        id,
                        message: "scored by two stacking folds".into(),
                    });
                }
            }
        }
        if out.len() != train.len() {
            return Err(ChurnError::InvalidInput(format!(
                "stacking at {scope} covered {} of {} ids",
                out.len(),
                train.len()
            )));
        }
        Ok(out)
    }

    /// Probabilities for every id of `test` from one LSTM fit on `train`.
    pub fn test_probabilities(
        &self,
        train: &Panel,
        test: &Panel,
        point: LstmPoint,
        scope: Scope,
    ) -> Result<HashMap<u64, f64>> {
        Ok((*self.lstm_scores(train, test, point, scope)?).clone())
    }

    /// Stacked probabilities for a (train, predict) pair: out-of-fold on the
    /// training rows, whole-split model on the prediction rows.
    fn stacked_probabilities(
        &self,
        train: &Panel,
        predict: &Panel,
        point: LstmPoint,
        scope: Scope,
    ) -> Result<HashMap<u64, f64>> {
        let mut probs = self.oof_lstm_probabilities(train, point, scope)?;
        probs.extend(self.test_probabilities(train, predict, point, scope)?);
        Ok(probs)
    }

    /// Builds design matrices, scales both with a scaler fit on all training
    /// rows, then fits one logistic model per `c` on the under-sampled
    /// training rows and scores the prediction rows.
    fn logistic_scores(
        &self,
        spec: &ModelSpec,
        train: &Panel,
        predict: &Panel,
        probs: Option<&HashMap<u64, f64>>,
        cs: &[f64],
        scope: Scope,
    ) -> Result<Vec<Vec<f64>>> {
        let ModelKind::Logistic(fspec) = spec.kind else {
            return Err(ChurnError::InvalidInput(format!("{} is not a logistic model", spec.key)));
        };
        let opts = &self.config.features;
        let x_train = build_feature_matrix(train, &fspec, probs, opts)?;
        let x_pred = build_feature_matrix(predict, &fspec, probs, opts)?;
        let scaler = ColumnScaler::fit(&x_train)?;
        let fit_set = self.undersample(train, scope)?;
        let keep: HashSet<u64> = fit_set.ids().into_iter().collect();
        let x_fit: FeatureMatrix = scaler.apply(&x_train)?.select(&keep);
        let y_fit = fit_set.labels();
        let x_pred = scaler.apply(&x_pred)?;
        self.exec().try_map(cs, |&c| {
            let model = fit_l1_logistic(&x_fit, &y_fit, c, &self.config.logit)?;
            self.audit.record(
                format!("logit[{}] {scope} C={c}", spec.key),
                scope.outer,
                x_fit.ids(),
                x_pred.ids(),
            );
            predict_proba(&model, &x_pred)
        })
    }

    /// Tunes `spec` on the inner folds of one outer-training split by mean
    /// validation AUC. Stacked specs need the frozen LSTM grid point.
    pub fn tune_inner(
        &self,
        train: &Panel,
        spec: &ModelSpec,
        outer: usize,
        stack_point: Option<LstmPoint>,
    ) -> Result<TuneResult> {
        let candidates = self.config.grid.points(spec);
        let folds = self.inner_folds(train, outer)?;
        let per_fold: Vec<Vec<f64>> = match spec.kind {
            ModelKind::Lstm => {
                let points = self.config.grid.lstm_points();
                let g = points.len();
                let flat = self.exec().try_map_range(folds.k() * g, |task| {
                    let (i, p) = (task / g, task % g);
                    let (itrain, ival) = folds.split(train, i);
                    let scores = self.lstm_scores(&itrain, &ival, points[p], Scope::inner(outer, i))?;
                    auc(&aligned(&ival.ids(), &scores), &ival.labels())
                })?;
                flat.chunks(g).map(<[f64]>::to_vec).collect()
            }
            ModelKind::Logistic(f) => {
                if f.use_lstm_prob && stack_point.is_none() {
                    return Err(ChurnError::InvalidInput(format!("{} needs a stacking LSTM", spec.key)));
                }
                let cs = &self.config.grid.c;
                self.exec().try_map_range(folds.k(), |i| {
                    let (itrain, ival) = folds.split(train, i);
                    let scope = Scope::inner(outer, i);
                    let probs = match stack_point {
                        Some(p) if f.use_lstm_prob => Some(self.stacked_probabilities(&itrain, &ival, p, scope)?),
                        _ => None,
                    };
                    let labels = ival.labels();
                    self.logistic_scores(spec, &itrain, &ival, probs.as_ref(), cs, scope)?
                        .iter()
                        .map(|s| auc(s, &labels))
                        .collect()
                })?
            }
        };
        Ok(TuneResult::from_scores(candidates, per_fold))
    }
}

// ---------------------------------------------------------------------------
// Experiment
// ---------------------------------------------------------------------------

/// One outer fold of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    /// Set chosen by this fold's inner CV.
    pub chosen: Hyper,
    /// Mean inner validation AUC of the chosen set.
    pub inner_auc: f64,
    /// Outer test AUC of the chosen set.
    pub chosen_auc: f64,
    /// LSTM grid point behind the stacked probability column.
    pub stack_point: Option<LstmPoint>,
    /// Metrics on the outer test fold at the reported set.
    pub report: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecResult {
    pub key: String,
    pub name: String,
    pub folds: Vec<FoldResult>,
    /// Arithmetic mean of the fold reports.
    pub mean: MetricReport,
    pub reported: Hyper,
    pub selection: SelectionRule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub n_customers: usize,
    pub n_churners: usize,
    pub outer_test_sizes: Vec<usize>,
    pub specs: Vec<SpecResult>,
    #[serde(skip)]
    pub audit: Vec<AuditEntry>,
}

impl ExperimentResult {
    pub fn spec(&self, key: &str) -> Option<&SpecResult> {
        self.specs.iter().find(|s| s.key == key)
    }

    /// Relative top-decile lift gain of model `a` over model `b`.
    pub fn lift_improvement(&self, a: &str, b: &str) -> Option<f64> {
        Some(improvement_ratio(self.spec(a)?.mean.lift10, self.spec(b)?.mean.lift10))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Per-fold state of one spec before the reported set is fixed.
struct FoldSpec {
    tune: TuneResult,
    stack_point: Option<LstmPoint>,
    /// Outer test reports by candidate index (all of them for logistic
    /// models, the chosen one for the LSTM).
    reports: BTreeMap<usize, MetricReport>,
}

struct OuterSplit {
    train: Panel,
    test: Panel,
}

impl Session<'_> {
    fn evaluate_lstm(&self, split: &OuterSplit, outer: usize, point: LstmPoint) -> Result<MetricReport> {
        let scores = self.lstm_scores(&split.train, &split.test, point, Scope::outer(outer))?;
        evaluate(&aligned(&split.test.ids(), &scores), &split.test.labels(), &self.config.empc)
    }

    fn run_outer_fold(&self, split: &OuterSplit, outer: usize, specs: &[ModelSpec]) -> Result<Vec<FoldSpec>> {
        let lstm_spec = MODEL_SPECS[8];
        let lstm_tune = if specs.iter().any(ModelSpec::uses_lstm) {
            Some(self.tune_inner(&split.train, &lstm_spec, outer, None)?)
        } else {
            None
        };
        let stack_point = lstm_tune.as_ref().map(|t| match t.best() {
            Hyper::Lstm(p) => p,
            Hyper::Logistic { .. } => unreachable!("LSTM grid yields LSTM points"),
        });
        let stacked = match stack_point {
            Some(p) if specs.iter().any(ModelSpec::is_stacked) => {
                Some(self.stacked_probabilities(&split.train, &split.test, p, Scope::outer(outer))?)
            }
            _ => None,
        };

        let mut out = Vec::with_capacity(specs.len());
        for spec in specs {
            let ctx = |e: ChurnError| e.context(format!("outer fold {outer}, model {}", spec.key));
            let fold = match spec.kind {
                ModelKind::Lstm => {
                    let tune = lstm_tune.clone().expect("tuned above");
                    let Hyper::Lstm(point) = tune.best() else { unreachable!() };
                    let report = self.evaluate_lstm(split, outer, point).map_err(ctx)?;
                    FoldSpec {
                        reports: BTreeMap::from([(tune.best_index, report)]),
                        tune,
                        stack_point: None,
                    }
                }
                ModelKind::Logistic(f) => {
                    let point = if f.use_lstm_prob { stack_point } else { None };
                    let tune = self.tune_inner(&split.train, spec, outer, point).map_err(ctx)?;
                    let probs = if f.use_lstm_prob { stacked.as_ref() } else { None };
                    let labels = split.test.labels();
                    let scores = self
                        .logistic_scores(spec, &split.train, &split.test, probs, &self.config.grid.c, Scope::outer(outer))
                        .map_err(ctx)?;
                    let reports = scores
                        .iter()
                        .map(|s| evaluate(s, &labels, &self.config.empc))
                        .collect::<Result<Vec<_>>>()
                        .map_err(ctx)?;
                    FoldSpec {
                        tune,
                        stack_point: point,
                        reports: reports.into_iter().enumerate().collect(),
                    }
                }
            };
            out.push(fold);
        }
        Ok(out)
    }
}

/// Runs the nested cross-validation on a raw (unstandardized) panel.
pub fn run_experiment(panel: &Panel, config: &ExperimentConfig) -> Result<ExperimentResult> {
    let session = Session::new(config)?;
    let result = session.run(panel)?;
    Ok(result)
}

impl Session<'_> {
    pub fn run(&self, panel: &Panel) -> Result<ExperimentResult> {
        if panel.is_standardized() {
            return Err(ChurnError::InvalidInput("experiments start from the raw panel".into()));
        }
        panel.require_both_classes("experiment panel")?;
        let specs = resolve_specs(&self.config.specs)?;
        let outer = self.outer_folds(panel)?;
        let splits: Vec<OuterSplit> = (0..outer.k())
            .map(|o| {
                let (train, test) = outer.split(panel, o);
                OuterSplit { train, test }
            })
            .collect();

        let mut per_fold = self
            .exec()
            .try_map_range(splits.len(), |o| self.run_outer_fold(&splits[o], o, &specs))?;

        let mut results = Vec::with_capacity(specs.len());
        for (s, spec) in specs.iter().enumerate() {
            let chosen: Vec<Hyper> = per_fold.iter().map(|f| f[s].tune.best()).collect();
            let chosen_aucs: Vec<f64> = per_fold.iter().map(|f| f[s].reports[&f[s].tune.best_index].auc).collect();
            let selection = select_reported_model(&chosen, &chosen_aucs)?;
            let mut folds = Vec::with_capacity(splits.len());
            for (o, fold) in per_fold.iter_mut().enumerate() {
                let fs = &mut fold[s];
                let idx = fs
                    .tune
                    .candidates
                    .iter()
                    .position(|h| *h == selection.hyper)
                    .expect("selected set comes from the grid");
                if let Entry::Vacant(slot) = fs.reports.entry(idx) {
                    let Hyper::Lstm(point) = selection.hyper else {
                        unreachable!("logistic folds score every grid point")
                    };
                    let report = self
                        .evaluate_lstm(&splits[o], o, point)
                        .map_err(|e| e.context(format!("outer fold {o}, model {}", spec.key)))?;
                    slot.insert(report);
                }
                folds.push(FoldResult {
                    fold: o,
                    chosen: fs.tune.best(),
                    inner_auc: fs.tune.mean_aucs[fs.tune.best_index],
                    chosen_auc: chosen_aucs[o],
                    stack_point: fs.stack_point,
                    report: fs.reports[&idx].clone(),
                });
            }
            let reports: Vec<MetricReport> = folds.iter().map(|f| f.report.clone()).collect();
            results.push(SpecResult {
                key: spec.key.to_string(),
                name: spec.name.to_string(),
                mean: MetricReport::mean(&reports)?,
                folds,
                reported: selection.hyper,
                selection: selection.rule,
            });
        }

        let audit = self.audit.entries();
        let test_ids: Vec<HashSet<u64>> = splits.iter().map(|s| s.test.ids().into_iter().collect()).collect();
        verify_audit(&audit, &test_ids)?;
        Ok(ExperimentResult {
            n_customers: panel.len(),
            n_churners: panel.n_churners(),
            outer_test_sizes: splits.iter().map(|s| s.test.len()).collect(),
            specs: results,
            audit,
        })
    }
}
