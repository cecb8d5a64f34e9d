//! Positive-unlabeled meta-learners.
//!
//! Adapter-PU rescales a classifier of labeled-vs-unlabeled by the label
//! frequency `c = p(s=1 | y=1)`, estimated as the mean score of held-out
//! labeled positives. UPU minimizes the unbiased PU risk
//!
//! ```text
//! R(g) = π·R̂_p⁺(g) − π·R̂_p⁻(g) + R̂_u⁻(g)
//! ```
//!
//! where `R̂_p^±` average `ℓ(±g)` over labeled positives and `R̂_u⁻` averages
//! `ℓ(−g)` over the unlabeled sample, here every training row (a draw from
//! the marginal, as the estimator assumes).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::logistic::{fit_logistic, LogisticModel};
use crate::data::stratified_split;
use crate::error::{Error, Result};
use crate::util::{derive_seed, log1p_exp, sigmoid};

/// Fewest labeled positives accepted for calibration.
pub const MIN_CALIBRATION_POSITIVES: usize = 5;
/// Estimated priors are clamped into this range.
pub const PRIOR_CLAMP: (f64, f64) = (1e-3, 0.99);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PuCalibration {
    pub c: f64,
    /// How the held-out positives were chosen.
    pub estimation_fold: String,
    pub n_positives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterPuConfig {
    /// Share of the data held out per calibration fold; `round(1/f)` folds.
    pub holdout_fraction: f64,
    pub l2: f64,
}

impl Default for AdapterPuConfig {
    fn default() -> Self {
        AdapterPuConfig {
            holdout_fraction: 0.2,
            l2: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterPu {
    pub base: LogisticModel,
    pub calibration: PuCalibration,
}

impl AdapterPu {
    pub fn base_scores(&self, x: &DMatrix<f64>) -> Vec<f64> {
        self.base.predict_proba(x)
    }

    /// `min(1, base / c)`.
    pub fn predict_proba(&self, x: &DMatrix<f64>) -> Vec<f64> {
        self.base_scores(x)
            .into_iter()
            .map(|s| correct_score(s, self.calibration.c))
            .collect()
    }
}

pub fn correct_score(base: f64, c: f64) -> f64 {
    (base / c).min(1.0)
}

/// Cross-fitted Elkan-Noto estimate: every labeled positive is scored by a
/// classifier that did not see it, and `ĉ` is the mean of those scores.
pub fn estimate_label_frequency(x: &DMatrix<f64>, s: &[bool], cfg: &AdapterPuConfig, seed: u64) -> Result<PuCalibration> {
    let n_pos = s.iter().filter(|&&v| v).count();
    if n_pos < MIN_CALIBRATION_POSITIVES {
        return Err(Error::data(format!(
            "{n_pos} labeled positives; calibration needs at least {MIN_CALIBRATION_POSITIVES}"
        )));
    }
    if !(cfg.holdout_fraction > 0.0 && cfg.holdout_fraction < 1.0) {
        return Err(Error::config(format!(
            "holdout fraction {} outside (0, 1)",
            cfg.holdout_fraction
        )));
    }
    let k = ((1.0 / cfg.holdout_fraction).round() as usize).clamp(2, n_pos);
    let folds = fold_ids(s, k, seed)?;
    let mut total = 0.0;
    for f in 0..k {
        let train: Vec<usize> = (0..s.len()).filter(|&i| folds[i] != f).collect();
        let held: Vec<usize> = (0..s.len()).filter(|&i| folds[i] == f && s[i]).collect();
        if held.is_empty() {
            continue;
        }
        let yt: Vec<bool> = train.iter().map(|&i| s[i]).collect();
        let model = fit_logistic(&x.select_rows(&train), &yt, None, cfg.l2)?;
        total += model.predict_proba(&x.select_rows(&held)).iter().sum::<f64>();
    }
    let c = total / n_pos as f64;
    if !(c > 0.0) {
        return Err(Error::numerical("estimated label frequency is zero"));
    }
    Ok(PuCalibration {
        c: c.min(1.0),
        estimation_fold: format!("{k}-fold cross-fit over all {n_pos} labeled positives"),
        n_positives: n_pos,
    })
}

/// Class-stratified fold ids built from repeated stratified splits.
fn fold_ids(s: &[bool], k: usize, seed: u64) -> Result<Vec<usize>> {
    let mut ids = vec![0usize; s.len()];
    let mut rest: Vec<usize> = (0..s.len()).collect();
    for f in 0..k - 1 {
        let sub: Vec<bool> = rest.iter().map(|&i| s[i]).collect();
        let take = 1.0 / (k - f) as f64;
        let (chosen, remaining) = stratified_split(&sub, take, derive_seed(seed, f as u64))?;
        for &c in &chosen {
            ids[rest[c]] = f;
        }
        rest = remaining.iter().map(|&r| rest[r]).collect();
    }
    for &i in &rest {
        ids[i] = k - 1;
    }
    Ok(ids)
}

pub fn fit_adapter_pu(x: &DMatrix<f64>, s: &[bool], cfg: &AdapterPuConfig, seed: u64) -> Result<AdapterPu> {
    let calibration = estimate_label_frequency(x, s, cfg, seed)?;
    let base = fit_logistic(x, s, None, cfg.l2)?;
    Ok(AdapterPu { base, calibration })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PuLoss {
    Logistic,
    DoubleHinge,
}

impl PuLoss {
    /// Loss of predicting the positive class at margin `z`.
    pub fn value(self, z: f64) -> f64 {
        match self {
            PuLoss::Logistic => log1p_exp(-z),
            PuLoss::DoubleHinge => (-z).max((0.5 - 0.5 * z).max(0.0)),
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            PuLoss::Logistic => -sigmoid(-z),
            PuLoss::DoubleHinge => {
                if z < -1.0 {
                    -1.0
                } else if z < 1.0 {
                    -0.5
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UpuConfig {
    /// Class prior `π`; estimated from the labeled rate and `ĉ` when absent.
    pub prior: Option<f64>,
    pub loss: PuLoss,
    pub l2: f64,
    pub max_iter: usize,
}

impl Default for UpuConfig {
    fn default() -> Self {
        UpuConfig {
            prior: None,
            loss: PuLoss::Logistic,
            l2: 1e-3,
            max_iter: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpuModel {
    pub intercept: f64,
    pub coef: Vec<f64>,
    pub prior: f64,
    pub loss: PuLoss,
    pub objective_trace: Vec<f64>,
}

impl UpuModel {
    pub fn decision(&self, x: &DMatrix<f64>) -> Vec<f64> {
        (0..x.nrows())
            .map(|i| self.intercept + x.row(i).iter().zip(&self.coef).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    }

    pub fn predict_proba(&self, x: &DMatrix<f64>) -> Vec<f64> {
        self.decision(x).into_iter().map(sigmoid).collect()
    }
}

/// Empirical unbiased PU risk of decision values `g` (no regularization).
pub fn pu_risk(g_pos: &[f64], g_unl: &[f64], prior: f64, loss: PuLoss) -> f64 {
    let np = g_pos.len() as f64;
    let nu = g_unl.len() as f64;
    let rp_plus: f64 = g_pos.iter().map(|&g| loss.value(g)).sum::<f64>() / np;
    let rp_minus: f64 = g_pos.iter().map(|&g| loss.value(-g)).sum::<f64>() / np;
    let ru_minus: f64 = g_unl.iter().map(|&g| loss.value(-g)).sum::<f64>() / nu;
    prior * rp_plus - prior * rp_minus + ru_minus
}

fn regularized(theta: &DVector<f64>, xa: &DMatrix<f64>, s: &[bool], prior: f64, loss: PuLoss, l2: f64) -> f64 {
    let g = xa * theta;
    let pos: Vec<f64> = (0..s.len()).filter(|&i| s[i]).map(|i| g[i]).collect();
    let all: Vec<f64> = g.iter().copied().collect();
    let w = theta.rows(1, theta.len() - 1);
    pu_risk(&pos, &all, prior, loss) + 0.5 * l2 * w.norm_squared()
}

/// Gradient of the regularized risk with respect to `(intercept, coef)`.
fn risk_gradient(theta: &DVector<f64>, xa: &DMatrix<f64>, s: &[bool], prior: f64, loss: PuLoss, l2: f64) -> DVector<f64> {
    let g = xa * theta;
    let n = s.len() as f64;
    let np = s.iter().filter(|&&v| v).count() as f64;
    let d = DVector::from_fn(s.len(), |i, _| {
        // d/dg of ℓ(−g) is −ℓ'(−g).
        let mut v = -loss.derivative(-g[i]) / n;
        if s[i] {
            v += prior * (loss.derivative(g[i]) + loss.derivative(-g[i])) / np;
        }
        v
    });
    let mut grad = xa.tr_mul(&d);
    for j in 1..theta.len() {
        grad[j] += l2 * theta[j];
    }
    grad
}

pub fn resolve_prior(cfg: &UpuConfig, labeled_rate: f64, c: Option<f64>) -> Result<(f64, Vec<String>)> {
    let mut warnings = Vec::new();
    let prior = match cfg.prior {
        Some(p) => {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::config(format!("class prior {p} outside (0, 1)")));
            }
            p
        }
        None => {
            let c = c.ok_or_else(|| Error::config("no class prior and no label-frequency estimate"))?;
            let raw = labeled_rate / c;
            let p = raw.clamp(PRIOR_CLAMP.0, PRIOR_CLAMP.1);
            if p != raw {
                warnings.push(format!("estimated prior {raw:.4} clamped to {p}"));
            }
            p
        }
    };
    if prior > 0.95 {
        warnings.push(format!("class prior {prior} is extreme; nearly every row will be called positive"));
    }
    Ok((prior, warnings))
}

pub fn fit_upu(x: &DMatrix<f64>, s: &[bool], prior: f64, cfg: &UpuConfig) -> Result<UpuModel> {
    let (n, p) = (x.nrows(), x.ncols());
    if !(prior > 0.0 && prior < 1.0) {
        return Err(Error::config(format!("class prior {prior} outside (0, 1)")));
    }
    if s.len() != n || !s.iter().any(|&v| v) {
        return Err(Error::data("UPU needs aligned labels with at least one positive"));
    }
    let mut xa = DMatrix::from_element(n, p + 1, 1.0);
    xa.columns_mut(1, p).copy_from(x);
    let mut theta = DVector::zeros(p + 1);
    let f = |t: &DVector<f64>| regularized(t, &xa, s, prior, cfg.loss, cfg.l2);
    let mut current = f(&theta);
    let mut trace = vec![current];
    match cfg.loss {
        PuLoss::Logistic => {
            // Risk = −π·mean_p(g) + mean_all ℓ(−g): smooth and convex, so
            // damped Newton with the mean-all Hessian.
            for _ in 0..cfg.max_iter {
                let grad = risk_gradient(&theta, &xa, s, prior, cfg.loss, cfg.l2);
                if grad.amax() < 1e-10 {
                    break;
                }
                let g = &xa * &theta;
                let mut hess = DMatrix::zeros(p + 1, p + 1);
                for i in 0..n {
                    let q = sigmoid(g[i]);
                    let row = xa.row(i).transpose();
                    hess.ger(q * (1.0 - q) / n as f64, &row, &row, 1.0);
                }
                for j in 0..=p {
                    hess[(j, j)] += if j == 0 { 1e-10 } else { cfg.l2 + 1e-10 };
                }
                let step = hess.cholesky().map(|c| c.solve(&grad)).unwrap_or_else(|| grad.clone());
                let slope = grad.dot(&step);
                let mut t = 1.0;
                let mut moved = false;
                while t > 1e-12 {
                    let cand = &theta - &step * t;
                    let val = f(&cand);
                    if val <= current - 1e-4 * t * slope {
                        theta = cand;
                        current = val;
                        moved = true;
                        break;
                    }
                    t *= 0.5;
                }
                if !moved {
                    break;
                }
                trace.push(current);
            }
        }
        PuLoss::DoubleHinge => {
            // Subgradient descent with diminishing steps; the best iterate
            // is kept, so the reported objective never increases.
            let mut best = (current, theta.clone());
            let mut iterate = theta.clone();
            for it in 0..cfg.max_iter {
                let grad = risk_gradient(&iterate, &xa, s, prior, cfg.loss, cfg.l2);
                let norm = grad.norm();
                if norm < 1e-12 {
                    break;
                }
                iterate -= &grad * (0.5 / ((it + 1) as f64).sqrt() / norm.max(1.0));
                let val = f(&iterate);
                if val < best.0 {
                    best = (val, iterate.clone());
                }
                trace.push(best.0);
            }
            theta = best.1;
        }
    }
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("UPU solver diverged"));
    }
    Ok(UpuModel {
        intercept: theta[0],
        coef: theta.rows(1, p).iter().copied().collect(),
        prior,
        loss: cfg.loss,
        objective_trace: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn correction_is_division_capped_at_one() {
        assert!((correct_score(0.4, 0.8) - 0.5).abs() < 1e-15);
        assert_eq!(correct_score(0.9, 0.5), 1.0);
    }

    #[test]
    fn four_point_risk_by_hand() {
        let pos = [1.0, -0.5];
        let unl = [1.0, -0.5, 2.0, 0.0];
        let l = |z: f64| (1.0 + (-z).exp()).ln();
        let rp_plus = (l(1.0) + l(-0.5)) / 2.0;
        let rp_minus = (l(-1.0) + l(0.5)) / 2.0;
        let ru = (l(-1.0) + l(0.5) + l(-2.0) + l(0.0)) / 4.0;
        let expected = 0.3 * rp_plus - 0.3 * rp_minus + ru;
        assert!((pu_risk(&pos, &unl, 0.3, PuLoss::Logistic) - expected).abs() < 1e-14);
        // Double hinge by hand: ℓ(z) = max(−z, max(0, (1−z)/2)).
        let dh = |z: f64| (-z).max(((1.0 - z) / 2.0).max(0.0));
        let e2 = 0.3 * (dh(1.0) + dh(-0.5)) / 2.0 - 0.3 * (dh(-1.0) + dh(0.5)) / 2.0
            + (dh(-1.0) + dh(0.5) + dh(-2.0) + dh(0.0)) / 4.0;
        assert!((pu_risk(&pos, &unl, 0.3, PuLoss::DoubleHinge) - e2).abs() < 1e-14);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let x = DMatrix::from_fn(30, 2, |i, j| ((i * 7 + j * 11) % 13) as f64 / 6.0 - 1.0);
        let s: Vec<bool> = (0..30).map(|i| i % 4 == 0).collect();
        let mut xa = DMatrix::from_element(30, 3, 1.0);
        xa.columns_mut(1, 2).copy_from(&x);
        let theta = DVector::from_vec(vec![0.1, -0.3, 0.7]);
        let g = risk_gradient(&theta, &xa, &s, 0.4, PuLoss::Logistic, 0.01);
        for j in 0..3 {
            let mut a = theta.clone();
            a[j] += 1e-6;
            let mut b = theta.clone();
            b[j] -= 1e-6;
            let fd = (regularized(&a, &xa, &s, 0.4, PuLoss::Logistic, 0.01)
                - regularized(&b, &xa, &s, 0.4, PuLoss::Logistic, 0.01))
                / 2e-6;
            assert!((fd - g[j]).abs() < 1e-7, "{fd} vs {}", g[j]);
        }
    }

    fn gaussian_classes(n: usize, seed: u64) -> (DMatrix<f64>, Vec<bool>) {
        let mut rng = util::rng(seed);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let y: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let x = DMatrix::from_fn(n, 2, |i, _| noise.sample(&mut rng) + if y[i] { 1.2 } else { -1.2 });
        (x, y)
    }

    #[test]
    fn objective_is_monotone() {
        let (x, y) = gaussian_classes(200, 3);
        for loss in [PuLoss::Logistic, PuLoss::DoubleHinge] {
            let cfg = UpuConfig { loss, ..Default::default() };
            let m = fit_upu(&x, &y, 0.5, &cfg).unwrap();
            assert!(m.objective_trace.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        }
    }

    #[test]
    fn matches_logistic_when_unlabeled_are_negative() {
        let (x, y) = gaussian_classes(400, 4);
        let m = fit_upu(&x, &y, 0.5, &UpuConfig::default()).unwrap();
        let lr = fit_logistic(&x, &y, None, 1e-3).unwrap();
        let a = m.decision(&x);
        let b = lr.decision(&x);
        let agree = a.iter().zip(&b).filter(|(u, v)| (**u > 0.0) == (**v > 0.0)).count();
        assert!(agree as f64 >= 0.95 * 400.0, "{agree}");
    }

    #[test]
    fn prior_handling() {
        assert!(resolve_prior(&UpuConfig { prior: Some(1.0), ..Default::default() }, 0.1, None).is_err());
        let (p, w) = resolve_prior(&UpuConfig::default(), 0.2, Some(0.5)).unwrap();
        assert!((p - 0.4).abs() < 1e-12 && w.is_empty());
        let (p, w) = resolve_prior(&UpuConfig { prior: Some(0.999), ..Default::default() }, 0.2, None).unwrap();
        assert_eq!(p, 0.999);
        assert!(!w.is_empty());
    }

    #[test]
    fn label_frequency_recovered() {
        let (x, y) = gaussian_classes(600, 5);
        let x = x * 2.0;
        let s: Vec<bool> = y.iter().enumerate().map(|(i, &v)| v && (i / 2) % 2 == 0).collect();
        let cal = estimate_label_frequency(&x, &s, &AdapterPuConfig::default(), 1).unwrap();
        assert!((cal.c - 0.5).abs() < 0.1, "c = {}", cal.c);
    }
}
