//! Single-layer LSTM binary classifier over RFM sequences.
//!
//! Cell: `i, f, o = sigmoid(.)`, `g = tanh(.)`, `c_t = f*c_{t-1} + i*g`,
//! `h_t = o*tanh(c_t)` with `c_0 = h_0 = 0`; the churn probability is
//! `sigmoid(w.h_T + b)` read from the last hidden state. Gradients come from
//! hand-written backpropagation through time and training uses mini-batch
//! Adam on the mean binary cross-entropy.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Panel, RfmRow, CHANNELS};
use crate::error::{ChurnError, Result};
use crate::exec::Execution;
use crate::logit::sigmoid;
use crate::seed;

pub const HIDDEN_GRID: [usize; 4] = [5, 10, 25, 30];
pub const EPOCH_GRID: [usize; 4] = [10, 25, 50, 75];
pub const BATCH_GRID: [usize; 5] = [10, 25, 50, 100, 250];
pub const LEARNING_RATE: f64 = 0.001;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const FORGET_BIAS_INIT: f64 = 1.0;
/// Probability clamp inside the loss only.
const LOSS_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LstmHyper {
    pub hidden_units: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl LstmHyper {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_units == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(ChurnError::InvalidConfig(format!(
                "LSTM hyperparameters must be positive: {self:?}"
            )));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(ChurnError::InvalidConfig("LSTM learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Offsets of each parameter block in the flat parameter vector.
///
/// Gate rows are ordered input, forget, candidate, output; each block has
/// `hidden` rows.
#[derive(Debug, Clone, Copy)]
struct Layout {
    hidden: usize,
}

impl Layout {
    fn gates(self) -> usize {
        4 * self.hidden
    }
    fn w_in(self) -> usize {
        0
    }
    fn w_rec(self) -> usize {
        self.gates() * CHANNELS
    }
    fn bias(self) -> usize {
        self.w_rec() + self.gates() * self.hidden
    }
    fn w_out(self) -> usize {
        self.bias() + self.gates()
    }
    fn b_out(self) -> usize {
        self.w_out() + self.hidden
    }
    fn len(self) -> usize {
        self.b_out() + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmModel {
    hidden: usize,
    params: Vec<f64>,
    pub hyper: LstmHyper,
}

/// Per-sequence forward cache reused across calls.
#[derive(Default)]
struct Workspace {
    /// Activated gates per step, `4H` each.
    gates: Vec<f64>,
    /// Cell and hidden states, `(T+1) * H` with the zero state first.
    c: Vec<f64>,
    h: Vec<f64>,
    tanh_c: Vec<f64>,
    dz: Vec<f64>,
    dh: Vec<f64>,
    dc: Vec<f64>,
    dh_prev: Vec<f64>,
}

impl LstmModel {
    pub fn parameter_count(hidden: usize) -> usize {
        Layout { hidden }.len()
    }

    /// Uniform `[-1/sqrt(H), 1/sqrt(H)]` initialization with forget bias 1.
    pub fn init(hyper: LstmHyper, rng: &mut impl Rng) -> Self {
        let layout = Layout {
            hidden: hyper.hidden_units,
        };
        let bound = 1.0 / (hyper.hidden_units as f64).sqrt();
        let mut params: Vec<f64> = (0..layout.len()).map(|_| rng.random_range(-bound..=bound)).collect();
        let h = hyper.hidden_units;
        params[layout.bias() + h..layout.bias() + 2 * h].fill(FORGET_BIAS_INIT);
        LstmModel {
            hidden: h,
            params,
            hyper,
        }
    }

    pub fn from_params(hyper: LstmHyper, params: Vec<f64>) -> Result<Self> {
        let expected = Self::parameter_count(hyper.hidden_units);
        if params.len() != expected {
            return Err(ChurnError::Dimension {
                expected,
                got: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(ChurnError::NonFinite("LSTM parameters".into()));
        }
        Ok(LstmModel {
            hidden: hyper.hidden_units,
            params,
            hyper,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn layout(&self) -> Layout {
        Layout { hidden: self.hidden }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: LstmModel = serde_json::from_str(text)?;
        Self::from_params(m.hyper, m.params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| ChurnError::io(path, e))
    }

    /// Runs the recurrence, filling `ws`; returns the output logit.
    fn run(&self, seq: &[RfmRow], ws: &mut Workspace) -> f64 {
        let h_n = self.hidden;
        let g_n = 4 * h_n;
        let l = self.layout();
        let t_len = seq.len();
        let p = &self.params;
        let (w_in, w_rec, bias) = (
            &p[l.w_in()..l.w_rec()],
            &p[l.w_rec()..l.bias()],
            &p[l.bias()..l.w_out()],
        );
        ws.gates.resize(t_len * g_n, 0.0);
        ws.c.resize((t_len + 1) * h_n, 0.0);
        ws.h.resize((t_len + 1) * h_n, 0.0);
        ws.tanh_c.resize(t_len * h_n, 0.0);
        ws.c[..h_n].fill(0.0);
        ws.h[..h_n].fill(0.0);

        for (t, x) in seq.iter().enumerate() {
            let (h_prev, _) = ws.h[t * h_n..].split_at(h_n);
            let gates = &mut ws.gates[t * g_n..(t + 1) * g_n];
            for r in 0..g_n {
                let wi = &w_in[r * CHANNELS..(r + 1) * CHANNELS];
                let wr = &w_rec[r * h_n..(r + 1) * h_n];
                let mut z = bias[r] + wi[0] * x[0] + wi[1] * x[1] + wi[2] * x[2];
                z += wr.iter().zip(h_prev).map(|(a, b)| a * b).sum::<f64>();
                gates[r] = if (2 * h_n..3 * h_n).contains(&r) { z.tanh() } else { sigmoid(z) };
            }
            for k in 0..h_n {
                let (i, f, g, o) = (gates[k], gates[h_n + k], gates[2 * h_n + k], gates[3 * h_n + k]);
                let c = f * ws.c[t * h_n + k] + i * g;
                let tc = c.tanh();
                ws.c[(t + 1) * h_n + k] = c;
                ws.tanh_c[t * h_n + k] = tc;
                ws.h[(t + 1) * h_n + k] = o * tc;
            }
        }
        let h_last = &ws.h[t_len * h_n..];
        let w_out = &p[l.w_out()..l.b_out()];
        w_out.iter().zip(h_last).map(|(a, b)| a * b).sum::<f64>() + p[l.b_out()]
    }

    /// Accumulates d(loss)/d(params) of one sequence into `grad`, given the
    /// derivative of the loss w.r.t. the output logit. Requires a prior `run`.
    fn backward(&self, seq: &[RfmRow], d_logit: f64, ws: &mut Workspace, grad: &mut [f64]) {
        let h_n = self.hidden;
        let g_n = 4 * h_n;
        let l = self.layout();
        let t_len = seq.len();
        let w_rec = &self.params[l.w_rec()..l.bias()];
        let w_out = &self.params[l.w_out()..l.b_out()];

        ws.dz.resize(g_n, 0.0);
        ws.dh.resize(h_n, 0.0);
        ws.dc.resize(h_n, 0.0);
        ws.dh_prev.resize(h_n, 0.0);

        let h_last = &ws.h[t_len * h_n..(t_len + 1) * h_n];
        for k in 0..h_n {
            grad[l.w_out() + k] += d_logit * h_last[k];
            ws.dh[k] = d_logit * w_out[k];
        }
        grad[l.b_out()] += d_logit;
        ws.dc.fill(0.0);

        for t in (0..t_len).rev() {
            let gates = &ws.gates[t * g_n..(t + 1) * g_n];
            for k in 0..h_n {
                let (i, f, g, o) = (gates[k], gates[h_n + k], gates[2 * h_n + k], gates[3 * h_n + k]);
                let tc = ws.tanh_c[t * h_n + k];
                let dh = ws.dh[k];
                let d_o = dh * tc;
                let dc = ws.dc[k] + dh * o * (1.0 - tc * tc);
                let c_prev = ws.c[t * h_n + k];
                ws.dz[k] = dc * g * i * (1.0 - i);
                ws.dz[h_n + k] = dc * c_prev * f * (1.0 - f);
                ws.dz[2 * h_n + k] = dc * i * (1.0 - g * g);
                ws.dz[3 * h_n + k] = d_o * o * (1.0 - o);
                ws.dc[k] = dc * f;
            }
            let x = &seq[t];
            let h_prev = &ws.h[t * h_n..(t + 1) * h_n];
            ws.dh_prev.fill(0.0);
            for r in 0..g_n {
                let dz = ws.dz[r];
                if dz == 0.0 {
                    continue;
                }
                let gi = l.w_in() + r * CHANNELS;
                grad[gi] += dz * x[0];
                grad[gi + 1] += dz * x[1];
                grad[gi + 2] += dz * x[2];
                grad[l.bias() + r] += dz;
                let gr = &mut grad[l.w_rec() + r * h_n..l.w_rec() + (r + 1) * h_n];
                let wr = &w_rec[r * h_n..(r + 1) * h_n];
                for k in 0..h_n {
                    gr[k] += dz * h_prev[k];
                    ws.dh_prev[k] += dz * wr[k];
                }
            }
            std::mem::swap(&mut ws.dh, &mut ws.dh_prev);
        }
    }

    /// Churn probability for one sequence.
    pub fn forward(&self, seq: &[RfmRow]) -> Result<f64> {
        if seq.is_empty() {
            return Err(ChurnError::InvalidInput("empty sequence".into()));
        }
        let mut ws = Workspace::default();
        Ok(sigmoid(self.run(seq, &mut ws)))
    }

    /// Hidden states `h_1..h_T`.
    pub fn hidden_states(&self, seq: &[RfmRow]) -> Vec<Vec<f64>> {
        let mut ws = Workspace::default();
        self.run(seq, &mut ws);
        ws.h.chunks_exact(self.hidden).skip(1).map(<[f64]>::to_vec).collect()
    }

    /// Summed binary cross-entropy over `batch` and its gradient.
    pub fn loss_and_grad(&self, batch: &[(&[RfmRow], bool)]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; self.params.len()];
        let mut ws = Workspace::default();
        let loss = self.accumulate(batch.iter().copied(), &mut ws, &mut grad);
        (loss, grad)
    }

    fn accumulate<'a>(
        &self,
        batch: impl Iterator<Item = (&'a [RfmRow], bool)>,
        ws: &mut Workspace,
        grad: &mut [f64],
    ) -> f64 {
        let mut loss = 0.0;
        for (seq, y) in batch {
            let logit = self.run(seq, ws);
            let p = sigmoid(logit);
            loss += bce(p, y);
            let d_logit = p - if y { 1.0 } else { 0.0 };
            self.backward(seq, d_logit, ws, grad);
        }
        loss
    }

    /// Summed loss only.
    pub fn loss(&self, batch: &[(&[RfmRow], bool)]) -> f64 {
        let mut ws = Workspace::default();
        batch
            .iter()
            .map(|(seq, y)| bce(sigmoid(self.run(seq, &mut ws)), *y))
            .sum()
    }
}

fn bce(p: f64, y: bool) -> f64 {
    let p = p.clamp(LOSS_CLAMP, 1.0 - LOSS_CLAMP);
    if y {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

pub fn lstm_forward(model: &LstmModel, seq: &[RfmRow]) -> Result<f64> {
    model.forward(seq)
}

fn check_training_set(seqs: &[Vec<RfmRow>], labels: &[bool]) -> Result<()> {
    if seqs.len() != labels.len() {
        return Err(ChurnError::Dimension {
            expected: seqs.len(),
            got: labels.len(),
        });
    }
    if seqs.is_empty() {
        return Err(ChurnError::InsufficientData("empty LSTM training set".into()));
    }
    let pos = labels.iter().filter(|v| **v).count();
    if pos == 0 || pos == labels.len() {
        return Err(ChurnError::SingleClass("LSTM training set".into()));
    }
    if seqs.iter().any(Vec::is_empty) {
        return Err(ChurnError::InvalidInput("empty training sequence".into()));
    }
    if seqs.iter().flatten().flatten().any(|v| !v.is_finite()) {
        return Err(ChurnError::NonFinite("LSTM training sequences".into()));
    }
    Ok(())
}

pub fn train_lstm(seqs: &[Vec<RfmRow>], labels: &[bool], hyper: &LstmHyper) -> Result<LstmModel> {
    train_inner(seqs, labels, hyper, None)
}

/// Trains and also returns the mean training loss after every epoch.
pub fn train_lstm_traced(
    seqs: &[Vec<RfmRow>],
    labels: &[bool],
    hyper: &LstmHyper,
) -> Result<(LstmModel, Vec<f64>)> {
    let mut trace = Vec::new();
    let model = train_inner(seqs, labels, hyper, Some(&mut trace))?;
    Ok((model, trace))
}

fn train_inner(
    seqs: &[Vec<RfmRow>],
    labels: &[bool],
    hyper: &LstmHyper,
    mut trace: Option<&mut Vec<f64>>,
) -> Result<LstmModel> {
    hyper.validate()?;
    check_training_set(seqs, labels)?;
    let mut rng = seed::rng(hyper.seed);
    let mut model = LstmModel::init(*hyper, &mut rng);
    let n_params = model.params.len();
    let mut m = vec![0.0; n_params];
    let mut v = vec![0.0; n_params];
    let mut grad = vec![0.0; n_params];
    let mut ws = Workspace::default();
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut step = 0i32;
    let all: Vec<(&[RfmRow], bool)> = seqs.iter().map(Vec::as_slice).zip(labels.iter().copied()).collect();

    for _ in 0..hyper.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(hyper.batch_size) {
            grad.fill(0.0);
            model.accumulate(batch.iter().map(|&i| all[i]), &mut ws, &mut grad);
            let scale = 1.0 / batch.len() as f64;
            step += 1;
            let bc1 = 1.0 - ADAM_BETA1.powi(step);
            let bc2 = 1.0 - ADAM_BETA2.powi(step);
            for k in 0..n_params {
                let g = grad[k] * scale;
                m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * g;
                v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                model.params[k] -= hyper.learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        if let Some(t) = trace.as_deref_mut() {
            t.push(model.loss(&all) / all.len() as f64);
        }
    }
    if model.params.iter().any(|p| !p.is_finite()) {
        return Err(ChurnError::NonFinite("LSTM parameters after training".into()));
    }
    Ok(model)
}

/// Churn probabilities for every customer of a (standardized) panel, in
/// panel order.
pub fn predict_panel(model: &LstmModel, panel: &Panel, exec: Execution) -> Vec<f64> {
    exec.map(panel.records(), |r| {
        let mut ws = Workspace::default();
        sigmoid(model.run(&r.rfm, &mut ws))
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`, maximized
    /// over parameters.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

/// Compares BPTT gradients of the summed loss with central differences
/// (step 1e-5) for every parameter.
pub fn gradient_check(model: &LstmModel, batch: &[(&[RfmRow], bool)]) -> GradCheck {
    const STEP: f64 = 1e-5;
    let (_, analytic) = model.loss_and_grad(batch);
    let mut probe = model.clone();
    let mut out = GradCheck {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
    };
    for (k, &a) in analytic.iter().enumerate() {
        let orig = probe.params[k];
        probe.params[k] = orig + STEP;
        let plus = probe.loss(batch);
        probe.params[k] = orig - STEP;
        let minus = probe.loss(batch);
        probe.params[k] = orig;
        let numeric = (plus - minus) / (2.0 * STEP);
        let abs = (a - numeric).abs();
        out.max_abs_error = out.max_abs_error.max(abs);
        out.max_rel_error = out.max_rel_error.max(abs / a.abs().max(numeric.abs()).max(1e-6));
    }
    out
}
