//! L1-regularized binary logistic regression.
//!
//! Minimizes `sum_i log(1 + exp(-y_i (w.x_i + b))) + ||w||_1 / C` with labels
//! in `{-1, +1}` and an unpenalized intercept, by proximal gradient descent
//! with backtracking. Larger `C` means weaker regularization.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ChurnError, Result};
use crate::features::FeatureMatrix;

/// Regularization grid for the lasso baseline.
pub const C_GRID: [f64; 8] = [0.001, 0.01, 0.02, 0.03, 0.04, 0.05, 0.1, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogitOptions {
    pub max_iter: usize,
    /// Stop once no parameter moves by more than this in one iteration.
    pub tol: f64,
}

impl Default for LogitOptions {
    fn default() -> Self {
        LogitOptions {
            max_iter: 5000,
            tol: 1e-7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub columns: Vec<String>,
    pub weights: Vec<f64>,
    pub intercept: f64,
    #[serde(rename = "C")]
    pub c: f64,
    pub converged: bool,
    pub n_iter: usize,
}

impl LogisticModel {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: LogisticModel = serde_json::from_str(text)?;
        if m.columns.len() != m.weights.len() {
            return Err(ChurnError::Dimension {
                expected: m.columns.len(),
                got: m.weights.len(),
            });
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| ChurnError::io(path, e))
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn linear(row: &[f64], weights: &[f64], intercept: f64) -> f64 {
    row.iter().zip(weights).map(|(x, w)| x * w).sum::<f64>() + intercept
}

fn check_inputs(x: &FeatureMatrix, y: &[bool]) -> Result<()> {
    if x.n_rows() != y.len() {
        return Err(ChurnError::Dimension {
            expected: x.n_rows(),
            got: y.len(),
        });
    }
    if x.n_rows() == 0 {
        return Err(ChurnError::InsufficientData("logistic fit on zero rows".into()));
    }
    if x.rows().flatten().any(|v| !v.is_finite()) {
        return Err(ChurnError::NonFinite("logistic design matrix".into()));
    }
    Ok(())
}

/// Data term only.
pub fn smooth_loss(x: &FeatureMatrix, y: &[bool], weights: &[f64], intercept: f64) -> f64 {
    x.rows()
        .zip(y)
        .map(|(row, &yi)| {
            let z = linear(row, weights, intercept);
            softplus(if yi { -z } else { z })
        })
        .sum()
}

/// Data term with its gradient `(loss, d/dw, d/db)`.
pub fn smooth_loss_grad(x: &FeatureMatrix, y: &[bool], weights: &[f64], intercept: f64) -> (f64, Vec<f64>, f64) {
    let mut gw = vec![0.0; weights.len()];
    let mut gb = 0.0;
    let mut loss = 0.0;
    for (row, &yi) in x.rows().zip(y) {
        let z = linear(row, weights, intercept);
        loss += softplus(if yi { -z } else { z });
        let r = sigmoid(z) - if yi { 1.0 } else { 0.0 };
        for (g, v) in gw.iter_mut().zip(row) {
            *g += r * v;
        }
        gb += r;
    }
    (loss, gw, gb)
}

/// Full penalized objective.
pub fn objective(x: &FeatureMatrix, y: &[bool], weights: &[f64], intercept: f64, c: f64) -> f64 {
    smooth_loss(x, y, weights, intercept) + weights.iter().map(|w| w.abs()).sum::<f64>() / c
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

pub fn fit_l1_logistic(x: &FeatureMatrix, y: &[bool], c: f64, opts: &LogitOptions) -> Result<LogisticModel> {
    fit_inner(x, y, c, opts, None)
}

/// Same as [`fit_l1_logistic`], also returning the objective after every
/// accepted iteration (starting with the initial point).
pub fn fit_l1_logistic_traced(
    x: &FeatureMatrix,
    y: &[bool],
    c: f64,
    opts: &LogitOptions,
) -> Result<(LogisticModel, Vec<f64>)> {
    let mut trace = Vec::new();
    let model = fit_inner(x, y, c, opts, Some(&mut trace))?;
    Ok((model, trace))
}

fn fit_inner(
    x: &FeatureMatrix,
    y: &[bool],
    c: f64,
    opts: &LogitOptions,
    mut trace: Option<&mut Vec<f64>>,
) -> Result<LogisticModel> {
    check_inputs(x, y)?;
    if !c.is_finite() || c <= 0.0 {
        return Err(ChurnError::InvalidConfig(format!("C must be positive and finite, got {c}")));
    }
    let lambda = 1.0 / c;
    let p = x.n_cols();
    let mut w = vec![0.0; p];
    let mut b = 0.0;

    // 1/L with L bounding the Lipschitz constant of the data-term gradient.
    let frob: f64 = x.rows().map(|r| r.iter().map(|v| v * v).sum::<f64>() + 1.0).sum();
    let mut step = 4.0 / frob;

    let penalty = |w: &[f64]| lambda * w.iter().map(|v| v.abs()).sum::<f64>();
    let (mut loss, mut gw, mut gb) = smooth_loss_grad(x, y, &w, b);
    if let Some(t) = trace.as_deref_mut() {
        t.push(loss + penalty(&w));
    }

    let mut converged = false;
    let mut n_iter = 0;
    let mut w_new = vec![0.0; p];
    while n_iter < opts.max_iter {
        n_iter += 1;
        let (b_new, loss_new) = loop {
            for j in 0..p {
                w_new[j] = soft_threshold(w[j] - step * gw[j], step * lambda);
            }
            let b_new = b - step * gb;
            let loss_new = smooth_loss(x, y, &w_new, b_new);
            let mut lin = gb * (b_new - b);
            let mut sq = (b_new - b) * (b_new - b);
            for j in 0..p {
                let d = w_new[j] - w[j];
                lin += gw[j] * d;
                sq += d * d;
            }
            if loss_new <= loss + lin + sq / (2.0 * step) {
                break (b_new, loss_new);
            }
            step *= 0.5;
        };
        let max_change = w_new
            .iter()
            .zip(&w)
            .map(|(a, b)| (a - b).abs())
            .fold((b_new - b).abs(), f64::max);
        std::mem::swap(&mut w, &mut w_new);
        b = b_new;
        if let Some(t) = trace.as_deref_mut() {
            t.push(loss_new + penalty(&w));
        }
        if max_change < opts.tol {
            converged = true;
            break;
        }
        (loss, gw, gb) = smooth_loss_grad(x, y, &w, b);
        step *= 1.25;
    }

    Ok(LogisticModel {
        columns: x.columns().to_vec(),
        weights: w,
        intercept: b,
        c,
        converged,
        n_iter,
    })
}

/// Largest violation of the L1 subgradient optimality conditions.
pub fn optimality_residual(model: &LogisticModel, x: &FeatureMatrix, y: &[bool]) -> f64 {
    let lambda = 1.0 / model.c;
    let (_, gw, gb) = smooth_loss_grad(x, y, &model.weights, model.intercept);
    gw.iter()
        .zip(&model.weights)
        .map(|(g, w)| {
            if *w != 0.0 {
                (g + lambda * w.signum()).abs()
            } else {
                (g.abs() - lambda).max(0.0)
            }
        })
        .fold(gb.abs(), f64::max)
}

pub fn predict_proba(model: &LogisticModel, x: &FeatureMatrix) -> Result<Vec<f64>> {
    if x.n_cols() != model.weights.len() {
        return Err(ChurnError::Dimension {
            expected: model.weights.len(),
            got: x.n_cols(),
        });
    }
    Ok(x.rows().map(|r| sigmoid(linear(r, &model.weights, model.intercept))).collect())
}
