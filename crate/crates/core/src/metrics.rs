//! Ranking and profit metrics for churn scores.
//!
//! All metrics depend on scores only through their ordering (ties included),
//! so any strictly increasing transform of the scores leaves them unchanged.

use serde::{Deserialize, Serialize};
use statrs::function::beta::{checked_beta_reg, ln_beta};

use crate::dataset::round_half_up;
use crate::error::{ChurnError, Result};
use crate::exec::Execution;

fn class_counts(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(ChurnError::Dimension {
            expected: scores.len(),
            got: labels.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(ChurnError::NonFinite("scores".into()));
    }
    let pos = labels.iter().filter(|l| **l).count();
    Ok((pos, labels.len() - pos))
}

fn require_both(pos: usize, neg: usize) -> Result<()> {
    if pos == 0 || neg == 0 {
        return Err(ChurnError::SingleClass(format!("{pos} positives and {neg} negatives")));
    }
    Ok(())
}

/// Indices ordered by descending score, ties by ascending index.
fn descending_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// `(tp, fp)` after each tie group, scanning from the highest score down,
/// starting with `(0, 0)`.
fn roc_counts(scores: &[f64], labels: &[bool]) -> Vec<(u64, u64)> {
    let order = descending_order(scores);
    let mut points = vec![(0u64, 0u64)];
    let (mut tp, mut fp) = (0, 0);
    for (k, &i) in order.iter().enumerate() {
        if labels[i] {
            tp += 1;
        } else {
            fp += 1;
        }
        let group_ends = order.get(k + 1).is_none_or(|&j| scores[j] != scores[i]);
        if group_ends {
            points.push((tp, fp));
        }
    }
    points
}

/// Mann-Whitney AUC: `P(s+ > s-) + P(s+ = s-)/2`, exact over tie groups.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = class_counts(scores, labels)?;
    require_both(pos, neg)?;
    // Twice the U statistic stays an integer.
    let mut twice_u: u128 = 0;
    let (mut tp_prev, mut fp_prev) = (0u64, 0u64);
    for (tp, fp) in roc_counts(scores, labels).into_iter().skip(1) {
        let (dp, dn) = ((tp - tp_prev) as u128, (fp - fp_prev) as u128);
        // Positives in this group beat every negative ranked below them.
        twice_u += dp * (2 * (neg as u128 - fp as u128) + dn);
        tp_prev = tp;
        fp_prev = fp;
    }
    Ok(twice_u as f64 / (2.0 * pos as f64 * neg as f64))
}

fn top_k(n: usize, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(ChurnError::InvalidInput(format!("lift fraction {fraction} outside (0,1]")));
    }
    let k = round_half_up(n as f64 * fraction).min(n);
    if k == 0 {
        return Err(ChurnError::InsufficientData(format!(
            "top {fraction} of {n} customers rounds to nobody"
        )));
    }
    Ok(k)
}

fn lift_from_hits(hits: usize, k: usize, pos: usize, n: usize) -> f64 {
    (hits as f64 * n as f64) / (k as f64 * pos as f64)
}

/// Churn rate among the top `round(n * fraction)` customers over the overall
/// churn rate. Ties at the cutoff go to the earlier input index.
pub fn lift(scores: &[f64], labels: &[bool], fraction: f64) -> Result<f64> {
    let (pos, _) = class_counts(scores, labels)?;
    if pos == 0 {
        return Err(ChurnError::SingleClass("lift needs at least one churner".into()));
    }
    let n = scores.len();
    let k = top_k(n, fraction)?;
    let hits = descending_order(scores)[..k].iter().filter(|&&i| labels[i]).count();
    Ok(lift_from_hits(hits, k, pos, n))
}

/// Lift at percentiles `1..=max_percentile`.
pub fn lift_curve(scores: &[f64], labels: &[bool], max_percentile: u32) -> Result<Vec<(u32, f64)>> {
    let (pos, _) = class_counts(scores, labels)?;
    if pos == 0 {
        return Err(ChurnError::SingleClass("lift needs at least one churner".into()));
    }
    let n = scores.len();
    let order = descending_order(scores);
    let mut cum = Vec::with_capacity(n + 1);
    cum.push(0usize);
    for &i in &order {
        cum.push(cum.last().unwrap() + labels[i] as usize);
    }
    (1..=max_percentile)
        .map(|p| {
            let k = top_k(n, f64::from(p) / 100.0)?;
            Ok((p, lift_from_hits(cum[k], k, pos, n)))
        })
        .collect()
}

/// A point in ROC space: `f0` is the fraction of churners targeted (TPR),
/// `f1` the fraction of non-churners targeted (FPR).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub f0: f64,
    pub f1: f64,
}

fn upper_hull(counts: &[(u64, u64)]) -> Vec<(u64, u64)> {
    // Points arrive sorted by fp then tp; keep clockwise turns only, so
    // collinear points drop out and slopes strictly decrease.
    let mut hull: Vec<(u64, u64)> = Vec::with_capacity(counts.len());
    for &p in counts {
        while hull.len() >= 2 {
            let a = hull[hull.len() - 2];
            let b = hull[hull.len() - 1];
            let cross = (b.1 as i128 - a.1 as i128) * (p.0 as i128 - a.0 as i128)
                - (b.0 as i128 - a.0 as i128) * (p.1 as i128 - a.1 as i128);
            if cross >= 0 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(p);
    }
    hull
}

/// Empirical ROC points (every tie-group threshold plus the origin).
pub fn roc_points(scores: &[f64], labels: &[bool]) -> Result<Vec<RocPoint>> {
    let (pos, neg) = class_counts(scores, labels)?;
    require_both(pos, neg)?;
    Ok(to_points(&roc_counts(scores, labels), pos, neg))
}

fn to_points(counts: &[(u64, u64)], pos: usize, neg: usize) -> Vec<RocPoint> {
    counts
        .iter()
        .map(|&(tp, fp)| RocPoint {
            f0: tp as f64 / pos as f64,
            f1: fp as f64 / neg as f64,
        })
        .collect()
}

/// Upper-left convex hull of the empirical ROC from `(0,0)` to `(1,1)`.
pub fn roc_convex_hull(scores: &[f64], labels: &[bool]) -> Result<Vec<RocPoint>> {
    let (pos, neg) = class_counts(scores, labels)?;
    require_both(pos, neg)?;
    Ok(to_points(&upper_hull(&roc_counts(scores, labels)), pos, neg))
}

/// Cost/benefit constants of a retention campaign. The offer-acceptance rate
/// is `Beta(alpha, beta)` distributed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmpcParams {
    pub clv: f64,
    /// Cost of the retention offer.
    pub d: f64,
    /// Cost of contacting a customer.
    pub f: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for EmpcParams {
    fn default() -> Self {
        EmpcParams {
            clv: 200.0,
            d: 10.0,
            f: 1.0,
            alpha: 6.0,
            beta: 14.0,
        }
    }
}

impl EmpcParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.clv > 0.0
            && self.clv.is_finite()
            && self.d >= 0.0
            && self.f >= 0.0
            && self.d < self.clv
            && self.f < self.clv
            && self.alpha > 0.0
            && self.beta > 0.0
            && self.alpha.is_finite()
            && self.beta.is_finite();
        if ok {
            Ok(())
        } else {
            Err(ChurnError::InvalidConfig(format!("invalid EMPC parameters {self:?}")))
        }
    }

    pub fn delta(&self) -> f64 {
        self.d / self.clv
    }

    pub fn phi(&self) -> f64 {
        self.f / self.clv
    }

    /// Expected profit per customer at acceptance rate `gamma` when targeting
    /// the customers above the threshold that yields `point`. `pi0` is the
    /// churner prior.
    pub fn profit(&self, gamma: f64, point: RocPoint, pi0: f64) -> f64 {
        let (delta, phi) = (self.delta(), self.phi());
        self.clv * (gamma * (1.0 - delta) - phi) * pi0 * point.f0 - self.clv * (delta + phi) * (1.0 - pi0) * point.f1
    }
}

fn beta_cdf(a: f64, b: f64, x: f64) -> Result<f64> {
    let x = x.clamp(0.0, 1.0);
    checked_beta_reg(a, b, x)
        .map_err(|e| ChurnError::InvalidInput(format!("regularized incomplete beta({a}, {b}, {x}): {e}")))
}

/// Expected maximum profit of the optimally thresholded classifier.
///
/// For each acceptance rate the best threshold is a vertex of the ROC convex
/// hull. Consecutive vertices are indifferent at
/// `gamma_i = ((delta + phi) * pi1 * dF1 / (pi0 * dF0) + phi) / (1 - delta)`,
/// so each vertex owns an interval of gamma and its linear profit integrates
/// against the Beta density in closed form:
/// `int gamma h = alpha / (alpha + beta) * I(alpha + 1, beta)`.
pub fn empc(scores: &[f64], labels: &[bool], params: &EmpcParams) -> Result<f64> {
    params.validate()?;
    let hull = roc_convex_hull(scores, labels)?;
    let (pos, _) = class_counts(scores, labels)?;
    let pi0 = pos as f64 / labels.len() as f64;
    let pi1 = 1.0 - pi0;
    let (delta, phi) = (params.delta(), params.phi());
    let (a, b) = (params.alpha, params.beta);
    let mean = a / (a + b);

    // Indifference points between consecutive vertices; increasing because
    // hull slopes strictly decrease.
    let mut bounds = Vec::with_capacity(hull.len() + 1);
    bounds.push(f64::NEG_INFINITY);
    for w in hull.windows(2) {
        let (d0, d1) = (w[1].f0 - w[0].f0, w[1].f1 - w[0].f1);
        bounds.push(if d0 > 0.0 {
            ((delta + phi) * pi1 * d1 / (pi0 * d0) + phi) / (1.0 - delta)
        } else {
            f64::INFINITY
        });
    }
    bounds.push(f64::INFINITY);

    let mut total = 0.0;
    for (i, point) in hull.iter().enumerate() {
        let lo = bounds[i].clamp(0.0, 1.0);
        let hi = bounds[i + 1].clamp(0.0, 1.0);
        if hi <= lo {
            continue;
        }
        let mass = beta_cdf(a, b, hi)? - beta_cdf(a, b, lo)?;
        let first_moment = mean * (beta_cdf(a + 1.0, b, hi)? - beta_cdf(a + 1.0, b, lo)?);
        let slope = params.clv * (1.0 - delta) * pi0 * point.f0;
        let offset = -params.clv * phi * pi0 * point.f0 - params.clv * (delta + phi) * pi1 * point.f1;
        total += slope * first_moment + offset * mass;
    }
    Ok(total)
}

/// EMPC by trapezoidal integration over a uniform gamma grid, maximizing the
/// profit over every empirical ROC point at each grid node. Verification
/// oracle for [`empc`]; needs `alpha, beta >= 1` for a bounded density.
pub fn empc_bruteforce(
    scores: &[f64],
    labels: &[bool],
    params: &EmpcParams,
    grid_size: usize,
    exec: Execution,
) -> Result<f64> {
    params.validate()?;
    if grid_size < 2 {
        return Err(ChurnError::InvalidInput("grid needs at least two nodes".into()));
    }
    let points = roc_points(scores, labels)?;
    let (pos, _) = class_counts(scores, labels)?;
    let pi0 = pos as f64 / labels.len() as f64;
    let (a, b) = (params.alpha, params.beta);
    let log_norm = ln_beta(a, b);
    let h = 1.0 / (grid_size - 1) as f64;
    let values = exec.map_range(grid_size, |j| {
        let gamma = j as f64 * h;
        let density = if gamma <= 0.0 || gamma >= 1.0 {
            // Bounded endpoints for alpha, beta >= 1.
            match (gamma <= 0.0, a == 1.0, b == 1.0) {
                (true, true, _) => (-log_norm).exp(),
                (false, _, true) => (-log_norm).exp(),
                _ => 0.0,
            }
        } else {
            ((a - 1.0) * gamma.ln() + (b - 1.0) * (1.0 - gamma).ln() - log_norm).exp()
        };
        let best = points
            .iter()
            .map(|p| params.profit(gamma, *p, pi0))
            .fold(f64::NEG_INFINITY, f64::max);
        best * density
    });
    let inner: f64 = values[1..grid_size - 1].iter().sum();
    Ok(h * (inner + 0.5 * (values[0] + values[grid_size - 1])))
}

/// Maximum profit at a fixed acceptance rate (the deterministic limit).
pub fn max_profit(scores: &[f64], labels: &[bool], params: &EmpcParams, gamma: f64) -> Result<f64> {
    let hull = roc_convex_hull(scores, labels)?;
    let (pos, _) = class_counts(scores, labels)?;
    let pi0 = pos as f64 / labels.len() as f64;
    Ok(hull
        .iter()
        .map(|p| params.profit(gamma, *p, pi0))
        .fold(f64::NEG_INFINITY, f64::max))
}

pub const LIFT_CURVE_PERCENTILES: u32 = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub auc: f64,
    pub lift10: f64,
    pub empc: f64,
    /// `(percentile, lift)` for percentiles 1..=20.
    pub lift_curve: Vec<(u32, f64)>,
}

impl MetricReport {
    /// Element-wise arithmetic mean of several reports.
    pub fn mean(reports: &[MetricReport]) -> Result<MetricReport> {
        let n = reports.len();
        if n == 0 {
            return Err(ChurnError::InsufficientData("mean of zero reports".into()));
        }
        let avg = |f: &dyn Fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n as f64;
        let len = reports[0].lift_curve.len();
        let lift_curve = (0..len)
            .map(|k| (reports[0].lift_curve[k].0, avg(&|r| r.lift_curve[k].1)))
            .collect();
        Ok(MetricReport {
            auc: avg(&|r| r.auc),
            lift10: avg(&|r| r.lift10),
            empc: avg(&|r| r.empc),
            lift_curve,
        })
    }
}

/// AUC, top-decile lift, EMPC and the 20-percentile lift curve.
pub fn evaluate(scores: &[f64], labels: &[bool], params: &EmpcParams) -> Result<MetricReport> {
    Ok(MetricReport {
        auc: auc(scores, labels)?,
        lift10: lift(scores, labels, 0.10)?,
        empc: empc(scores, labels, params)?,
        lift_curve: lift_curve(scores, labels, LIFT_CURVE_PERCENTILES)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn pair_count_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut twice = 0u64;
        let (mut pos, mut neg) = (0u64, 0u64);
        for (i, &li) in labels.iter().enumerate() {
            if li {
                pos += 1;
            } else {
                neg += 1;
            }
            if !li {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if !lj {
                    twice += match scores[i].partial_cmp(&scores[j]).unwrap() {
                        std::cmp::Ordering::Greater => 2,
                        std::cmp::Ordering::Equal => 1,
                        std::cmp::Ordering::Less => 0,
                    };
                }
            }
        }
        twice as f64 / (2.0 * pos as f64 * neg as f64)
    }

    #[test]
    fn auc_examples() {
        let labels = [false, false, true, true];
        assert_eq!(auc(&[0.0, 0.0, 1.0, 1.0], &labels).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 4], &labels).unwrap(), 0.5);
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &labels).unwrap(), 0.75);
        assert!(matches!(auc(&[0.1, 0.2], &[true, true]), Err(ChurnError::SingleClass(_))));
    }

    #[test]
    fn auc_matches_pair_counting_with_ties() {
        let mut rng = crate::seed::rng(1);
        for _ in 0..50 {
            let n = rng.random_range(2..80);
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64 / 5.0).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.random::<bool>()).collect();
            labels[0] = true;
            labels[1] = false;
            assert_eq!(auc(&scores, &labels).unwrap(), pair_count_auc(&scores, &labels));
        }
    }

    #[test]
    fn lift_examples() {
        // n = 1000, prevalence 2%, perfect ranking.
        let labels: Vec<bool> = (0..1000).map(|i| i < 20).collect();
        let scores: Vec<f64> = labels.iter().map(|&l| l as u8 as f64).collect();
        assert_eq!(lift(&scores, &labels, 0.10).unwrap(), 10.0);
        assert_eq!(lift(&scores, &labels, 1.0).unwrap(), 1.0);

        // Anti-ranking at 20% prevalence.
        let labels: Vec<bool> = (0..1000).map(|i| i < 200).collect();
        let anti: Vec<f64> = labels.iter().map(|&l| if l { 0.0 } else { 1.0 }).collect();
        assert_eq!(lift(&anti, &labels, 0.10).unwrap(), 0.0);

        assert!(lift(&scores, &labels, 0.0).is_err());
        assert!(lift(&scores, &vec![false; 1000], 0.1).is_err());
        assert!(lift(&[0.1, 0.2, 0.3], &[true, false, false], 0.1).is_err());
    }

    #[test]
    fn random_scores_have_unit_lift_on_average() {
        let mut rng = crate::seed::rng(2);
        let mut labels: Vec<bool> = (0..10_000).map(|i| i < 500).collect();
        let scores: Vec<f64> = (0..10_000).map(|_| rng.random::<f64>()).collect();
        let mut total = 0.0;
        for _ in 0..200 {
            labels.shuffle(&mut rng);
            total += lift(&scores, &labels, 0.1).unwrap();
        }
        let mean = total / 200.0;
        assert!((0.85..=1.15).contains(&mean), "{mean}");
    }

    #[test]
    fn lift_curve_saturates_for_perfect_scores() {
        let labels: Vec<bool> = (0..1000).map(|i| i % 10 == 0).collect();
        let scores: Vec<f64> = labels.iter().map(|&l| if l { 0.9 } else { 0.1 }).collect();
        let curve = lift_curve(&scores, &labels, 20).unwrap();
        assert_eq!(curve.len(), 20);
        for (k, (p, l)) in curve.iter().enumerate() {
            assert_eq!(*p, k as u32 + 1);
            let expected = (100.0 / f64::from(*p)).min(10.0);
            assert!((l - expected).abs() < 1e-12, "p={p}: {l} vs {expected}");
        }
        assert!(curve.windows(2).all(|w| w[1].1 <= w[0].1));
    }

    #[test]
    fn constant_scores_give_unit_lift_curve() {
        let mut rng = crate::seed::rng(3);
        let mut labels: Vec<bool> = (0..10_000).map(|i| i < 1000).collect();
        let scores = vec![0.5; 10_000];
        let mut sums = [0.0; 20];
        for _ in 0..200 {
            labels.shuffle(&mut rng);
            for (k, (_, l)) in lift_curve(&scores, &labels, 20).unwrap().into_iter().enumerate() {
                sums[k] += l;
            }
        }
        for s in sums {
            assert!((0.85..=1.15).contains(&(s / 200.0)));
        }
    }

    fn hull_pairs(h: &[RocPoint]) -> Vec<(f64, f64)> {
        h.iter().map(|p| (p.f0, p.f1)).collect()
    }

    #[test]
    fn hull_examples() {
        let labels = [false, false, true, true];
        let perfect = roc_convex_hull(&[0.0, 0.0, 1.0, 1.0], &labels).unwrap();
        assert_eq!(hull_pairs(&perfect), vec![(0.0, 0.0), (1.0, 0.0), (1.0, 1.0)]);
        let flat = roc_convex_hull(&[0.2; 4], &labels).unwrap();
        assert_eq!(hull_pairs(&flat), vec![(0.0, 0.0), (1.0, 1.0)]);
        // Scores [0.1,0.4,0.35,0.8]: ROC (f1,f0) = (0,0),(0,.5),(.5,.5),(.5,1),(1,1);
        // (.5,.5) lies under the hull.
        let h = roc_convex_hull(&[0.1, 0.4, 0.35, 0.8], &labels).unwrap();
        assert_eq!(hull_pairs(&h), vec![(0.0, 0.0), (0.5, 0.0), (1.0, 0.5), (1.0, 1.0)]);
    }

    /// Hull oracle: keep every ROC point not strictly below some chord, then
    /// drop points lying on a chord between two kept neighbours.
    fn brute_hull(scores: &[f64], labels: &[bool]) -> Vec<(f64, f64)> {
        let pts = roc_points(scores, labels).unwrap();
        let below = |p: &RocPoint, a: &RocPoint, b: &RocPoint| {
            a.f1 < p.f1 && p.f1 < b.f1 && {
                let t = (p.f1 - a.f1) / (b.f1 - a.f1);
                p.f0 < a.f0 + t * (b.f0 - a.f0) - 1e-12
            }
        };
        let is_end = |p: &RocPoint| (p.f0 == 0.0 && p.f1 == 0.0) || (p.f0 == 1.0 && p.f1 == 1.0);
        let mut kept: Vec<RocPoint> = pts
            .iter()
            .filter(|p| {
                is_end(p)
                    || (!pts.iter().any(|a| pts.iter().any(|b| below(p, a, b)))
                        && !pts.iter().any(|q| q.f1 == p.f1 && q.f0 > p.f0)
                        && !pts.iter().any(|q| q.f0 == p.f0 && q.f1 < p.f1))
            })
            .copied()
            .collect();
        kept.sort_by(|a, b| a.f1.total_cmp(&b.f1).then(a.f0.total_cmp(&b.f0)));
        kept.dedup();
        let mut out: Vec<RocPoint> = Vec::new();
        for (i, p) in kept.iter().enumerate() {
            if i == 0 || i + 1 == kept.len() {
                out.push(*p);
                continue;
            }
            let (a, b) = (out.last().unwrap(), kept[i + 1]);
            let cross = (p.f1 - a.f1) * (b.f0 - a.f0) - (p.f0 - a.f0) * (b.f1 - a.f1);
            if cross.abs() > 1e-12 {
                out.push(*p);
            }
        }
        hull_pairs(&out)
    }

    #[test]
    fn hull_matches_brute_force() {
        let mut rng = crate::seed::rng(4);
        for _ in 0..60 {
            let n = rng.random_range(4..40);
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..8) as f64).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.random::<bool>()).collect();
            labels[0] = true;
            labels[1] = false;
            let fast = hull_pairs(&roc_convex_hull(&scores, &labels).unwrap());
            let slow = brute_hull(&scores, &labels);
            assert_eq!(fast.len(), slow.len(), "{fast:?} vs {slow:?}");
            for (u, v) in fast.iter().zip(&slow) {
                assert!((u.0 - v.0).abs() < 1e-12 && (u.1 - v.1).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hull_slopes_strictly_decrease() {
        let mut rng = crate::seed::rng(5);
        let n = 300;
        let labels: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.2).collect();
        let scores: Vec<f64> = labels.iter().map(|&l| rng.random::<f64>() + if l { 0.4 } else { 0.0 }).collect();
        let h = roc_convex_hull(&scores, &labels).unwrap();
        assert_eq!(h[0], RocPoint { f0: 0.0, f1: 0.0 });
        assert_eq!(*h.last().unwrap(), RocPoint { f0: 1.0, f1: 1.0 });
        // Compare slopes via cross products to avoid dividing by zero.
        for w in h.windows(3) {
            let (a, b, c) = (w[0], w[1], w[2]);
            let cross = (b.f1 - a.f1) * (c.f0 - b.f0) - (b.f0 - a.f0) * (c.f1 - b.f1);
            assert!(cross < 0.0);
        }
    }

    /// Integral of the positive part of the all-targeted profit line.
    fn diagonal_empc(pi0: f64, p: &EmpcParams) -> f64 {
        let (delta, phi) = (p.delta(), p.phi());
        let slope = p.clv * (1.0 - delta) * pi0;
        let offset = -p.clv * (phi * pi0 + (delta + phi) * (1.0 - pi0));
        let root = (-offset / slope).clamp(0.0, 1.0);
        let (a, b) = (p.alpha, p.beta);
        let mass = 1.0 - checked_beta_reg(a, b, root).unwrap();
        let moment = a / (a + b) * (1.0 - checked_beta_reg(a + 1.0, b, root).unwrap());
        slope * moment + offset * mass
    }

    #[test]
    fn empc_of_tied_scores() {
        let params = EmpcParams::default();
        // High prevalence: the all-targeted line crosses zero inside (0,1).
        let labels: Vec<bool> = (0..100).map(|i| i < 40).collect();
        let scores = vec![0.5; 100];
        let got = empc(&scores, &labels, &params).unwrap();
        let want = diagonal_empc(0.4, &params);
        assert!(want > 0.0);
        assert!((got - want).abs() < 1e-9 * params.clv, "{got} vs {want}");

        // Low prevalence: targeting everybody never pays, so the expected
        // profit at the Beta mean is negative and EMPC is zero.
        let labels: Vec<bool> = (0..100).map(|i| i < 5).collect();
        let mean_gamma = params.alpha / (params.alpha + params.beta);
        let at_mean = params.profit(mean_gamma, RocPoint { f0: 1.0, f1: 1.0 }, 0.05);
        assert!(at_mean < 0.0);
        assert_eq!(empc(&scores, &labels, &params).unwrap(), at_mean.max(0.0));
    }

    #[test]
    fn empc_matches_bruteforce_on_small_fixtures() {
        let params = EmpcParams::default();
        let mut rng = crate::seed::rng(6);
        for _ in 0..20 {
            let n = rng.random_range(10..120);
            let prevalence = rng.random_range(0.05..0.6);
            let mut labels: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < prevalence).collect();
            labels[0] = true;
            labels[1] = false;
            let scores: Vec<f64> = labels
                .iter()
                .map(|&l| (rng.random::<f64>() + if l { 0.5 } else { 0.0 }) * 10.0)
                .map(f64::round)
                .collect();
            let fast = empc(&scores, &labels, &params).unwrap();
            let slow = empc_bruteforce(&scores, &labels, &params, 20001, Execution::Sequential).unwrap();
            assert!((fast - slow).abs() < 1e-6 * params.clv, "{fast} vs {slow}");
            assert!(fast >= 0.0);
        }
    }

    #[test]
    fn empc_approaches_fixed_gamma_profit() {
        let mut rng = crate::seed::rng(7);
        let labels: Vec<bool> = (0..200).map(|i| i < 50).collect();
        let scores: Vec<f64> = labels.iter().map(|&l| rng.random::<f64>() + if l { 0.6 } else { 0.0 }).collect();
        let mut gaps = Vec::new();
        for alpha in [6.0, 60.0, 600.0] {
            let p = EmpcParams {
                alpha,
                beta: alpha * 0.7 / 0.3,
                ..EmpcParams::default()
            };
            let e = empc(&scores, &labels, &p).unwrap();
            let slow = empc_bruteforce(&scores, &labels, &p, 20001, Execution::Parallel).unwrap();
            assert!((e - slow).abs() < 1e-6 * p.clv);
            gaps.push((e - max_profit(&scores, &labels, &p, 0.3).unwrap()).abs());
        }
        assert!(gaps[0] > gaps[1] && gaps[1] > gaps[2], "{gaps:?}");
        assert!(gaps[2] < 0.05);
    }

    #[test]
    fn empc_is_homogeneous_in_currency() {
        let mut rng = crate::seed::rng(8);
        let labels: Vec<bool> = (0..150).map(|i| i % 4 == 0).collect();
        let scores: Vec<f64> = labels.iter().map(|&l| rng.random::<f64>() + if l { 0.5 } else { 0.0 }).collect();
        let p = EmpcParams::default();
        let p2 = EmpcParams {
            clv: 2.0 * p.clv,
            d: 2.0 * p.d,
            f: 2.0 * p.f,
            ..p
        };
        let a = empc(&scores, &labels, &p).unwrap();
        let b = empc(&scores, &labels, &p2).unwrap();
        assert!((2.0 * a - b).abs() < 1e-9);
        assert!(empc(&scores, &labels, &EmpcParams { d: 300.0, ..p }).is_err());
    }

    #[test]
    fn report_mean() {
        let r = |x: f64| MetricReport {
            auc: x,
            lift10: 2.0 * x,
            empc: 3.0 * x,
            lift_curve: vec![(1, x), (2, x + 1.0)],
        };
        let m = MetricReport::mean(&[r(1.0), r(2.0), r(3.0)]).unwrap();
        assert_eq!(m.auc, 2.0);
        assert_eq!(m.lift10, 4.0);
        assert_eq!(m.lift_curve, vec![(1, 2.0), (2, 3.0)]);
    }

    proptest! {
        #[test]
        fn metrics_are_rank_invariant(raw in prop::collection::vec((0.0f64..1.0, any::<bool>()), 20..120)) {
            let scores: Vec<f64> = raw.iter().map(|r| r.0).collect();
            let mut labels: Vec<bool> = raw.iter().map(|r| r.1).collect();
            labels[0] = true;
            labels[1] = false;
            let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
            let moved: Vec<f64> = scores.iter().map(|s| 2.0 * s - lo).collect();
            let p = EmpcParams::default();
            prop_assert_eq!(auc(&scores, &labels).unwrap(), auc(&moved, &labels).unwrap());
            prop_assert_eq!(lift(&scores, &labels, 0.1).unwrap(), lift(&moved, &labels, 0.1).unwrap());
            prop_assert_eq!(empc(&scores, &labels, &p).unwrap(), empc(&moved, &labels, &p).unwrap());
            prop_assert_eq!(lift(&scores, &labels, 1.0).unwrap(), 1.0);
        }

        #[test]
        fn auc_of_negated_scores_is_complement(raw in prop::collection::hash_set(0u32..1_000_000, 4..80), seed in any::<u64>()) {
            let scores: Vec<f64> = raw.into_iter().map(f64::from).collect();
            let mut rng = crate::seed::rng(seed);
            let mut labels: Vec<bool> = scores.iter().map(|_| rng.random::<bool>()).collect();
            labels[0] = true;
            labels[1] = false;
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            let total = auc(&scores, &labels).unwrap() + auc(&neg, &labels).unwrap();
            prop_assert!((total - 1.0).abs() < 1e-15);
        }
    }
}
