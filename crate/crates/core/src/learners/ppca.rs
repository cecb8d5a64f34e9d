//! Probabilistic PCA fitted by EM, with support for held-out entries, and
//! the held-out posterior predictive check that gates the deconfounder.
//!
//! The model is `x_i = W z_i + μ + ε_i` with `z_i ~ N(0, I_k)` and
//! `ε_i ~ N(0, σ² I)`. Held-out entries are treated as missing: every sample
//! keeps its own observed coordinate set, so the E-step uses a per-sample
//! `M_i = σ² I + W_oᵀ W_o` and the M-step a per-variable sufficient statistic.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Level0Dataset;
use crate::error::{Error, Result};
use crate::util::{self, derive_seed, Standardizer};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpcaConfig {
    pub k: usize,
    pub max_iter: usize,
    /// Relative log-likelihood change below which EM stops.
    pub tol: f64,
    /// Keeps `σ²` at this value instead of estimating it.
    pub fixed_sigma2: Option<f64>,
    pub seed: u64,
}

impl Default for PpcaConfig {
    fn default() -> Self {
        PpcaConfig {
            k: 15,
            max_iter: 300,
            tol: 1e-7,
            fixed_sigma2: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PpcaModel {
    pub config: PpcaConfig,
    /// Loadings, `V × k`.
    pub w: DMatrix<f64>,
    pub mu: DVector<f64>,
    pub sigma2: f64,
    /// Posterior mean scores, `J × k`.
    pub z: DMatrix<f64>,
    /// Column standardization applied before fitting.
    pub standardizer: Standardizer,
    /// Marginal log-likelihood at the start of every EM iteration.
    pub log_likelihood: Vec<f64>,
    pub converged: bool,
}

impl PpcaModel {
    pub fn k(&self) -> usize {
        self.w.ncols()
    }

    pub fn n_iter(&self) -> usize {
        self.log_likelihood.len()
    }
}

/// Fits PPCA on the column-standardized covariates of `ds`.
pub fn fit_ppca(ds: &Level0Dataset, config: &PpcaConfig) -> Result<PpcaModel> {
    let standardizer = Standardizer::fit(ds.x());
    if let Some(&v) = standardizer.zero_variance_columns().first() {
        return Err(Error::data(format!(
            "variable `{}` has zero variance; the factor model cannot use it",
            ds.variable_names()[v]
        )));
    }
    let y = standardizer.transform(ds.x());
    let fit = fit_ppca_matrix(&y, config, None)?;
    Ok(PpcaModel {
        config: config.clone(),
        w: fit.w,
        mu: fit.mu,
        sigma2: fit.sigma2,
        z: fit.z,
        standardizer,
        log_likelihood: fit.log_likelihood,
        converged: fit.converged,
    })
}

/// Entries excluded from fitting, indexed both ways.
#[derive(Debug, Clone)]
pub struct HeldOut {
    pub by_row: Vec<Vec<usize>>,
    pub by_col: Vec<Vec<usize>>,
    pub count: usize,
}

impl HeldOut {
    /// Picks `round(fraction · J · V)` entries uniformly at random.
    pub fn random(n_rows: usize, n_cols: usize, fraction: f64, seed: u64) -> Result<Self> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::config(format!("holdout fraction {fraction} outside (0, 1)")));
        }
        let total = n_rows * n_cols;
        let count = (fraction * total as f64).round() as usize;
        if count == 0 {
            return Err(Error::config("holdout fraction selects no entries"));
        }
        let mut rng = util::rng(seed);
        let mut by_row = vec![Vec::new(); n_rows];
        let mut by_col = vec![Vec::new(); n_cols];
        for flat in rand::seq::index::sample(&mut rng, total, count).iter() {
            let (r, c) = (flat / n_cols, flat % n_cols);
            by_row[r].push(c);
            by_col[c].push(r);
        }
        for list in by_row.iter_mut().chain(by_col.iter_mut()) {
            list.sort_unstable();
        }
        Ok(HeldOut { by_row, by_col, count })
    }
}

/// Raw EM output on an already standardized matrix.
#[derive(Debug, Clone)]
pub struct PpcaFit {
    pub w: DMatrix<f64>,
    pub mu: DVector<f64>,
    pub sigma2: f64,
    pub z: DMatrix<f64>,
    /// Inverse of `M_i` for every row (shared when nothing is held out).
    pub m_inv: Vec<DMatrix<f64>>,
    pub log_likelihood: Vec<f64>,
    pub converged: bool,
}

impl PpcaFit {
    fn m_inv_row(&self, i: usize) -> &DMatrix<f64> {
        if self.m_inv.len() == 1 {
            &self.m_inv[0]
        } else {
            &self.m_inv[i]
        }
    }
}

struct EStep {
    z: DMatrix<f64>,
    m_inv: Vec<DMatrix<f64>>,
    log_likelihood: f64,
}

/// EM for PPCA on `y` (J × V), ignoring entries listed in `held`.
pub fn fit_ppca_matrix(y: &DMatrix<f64>, config: &PpcaConfig, held: Option<&HeldOut>) -> Result<PpcaFit> {
    let (n, v) = (y.nrows(), y.ncols());
    let k = config.k;
    if k == 0 || k >= n.min(v) {
        return Err(Error::config(format!(
            "latent dimension k={k} must satisfy 0 < k < min(J, V) = {}",
            n.min(v)
        )));
    }
    if let Some(s2) = config.fixed_sigma2 {
        if !(s2 > 0.0 && s2.is_finite()) {
            return Err(Error::config("fixed sigma2 must be positive"));
        }
    }

    // Column means over observed entries, then residuals with held entries zeroed.
    let mut mu = DVector::zeros(v);
    let mut residual = y.clone();
    for c in 0..v {
        let held_rows = held.map_or(&[][..], |h| &h.by_col[c][..]);
        let col = y.column(c);
        let sum: f64 = col.iter().sum::<f64>() - held_rows.iter().map(|&r| col[r]).sum::<f64>();
        let count = n - held_rows.len();
        if count == 0 {
            return Err(Error::data(format!("column {c} has no observed entries")));
        }
        mu[c] = sum / count as f64;
        let mut rc = residual.column_mut(c);
        rc.add_scalar_mut(-mu[c]);
        for &r in held_rows {
            rc[r] = 0.0;
        }
    }
    let n_obs = (n * v - held.map_or(0, |h| h.count)) as f64;
    let sum_sq: f64 = residual.iter().map(|r| r * r).sum();

    let (mut w, mut sigma2) = init_loadings(&residual, k, n_obs, config.seed);
    if let Some(s2) = config.fixed_sigma2 {
        sigma2 = s2;
    }

    let mut trace = Vec::new();
    let mut converged = false;
    for _ in 0..config.max_iter {
        let e = e_step(&residual, &w, sigma2, held, sum_sq)?;
        if let Some(&prev) = trace.last() {
            let prev: f64 = prev;
            let ll = e.log_likelihood;
            if ll < prev - 1e-9 * prev.abs() - 1e-9 {
                return Err(Error::numerical(format!(
                    "PPCA log-likelihood decreased from {prev} to {ll}"
                )));
            }
            trace.push(ll);
            if (ll - prev).abs() <= config.tol * prev.abs() {
                converged = true;
                break;
            }
        } else {
            trace.push(e.log_likelihood);
        }
        let (w_new, s2_new) = m_step(&residual, &e, sigma2, held, sum_sq, n_obs)?;
        w = w_new;
        if config.fixed_sigma2.is_none() {
            sigma2 = s2_new.max(1e-10);
        }
    }
    let e = e_step(&residual, &w, sigma2, held, sum_sq)?;
    Ok(PpcaFit {
        w,
        mu,
        sigma2,
        z: e.z,
        m_inv: e.m_inv,
        log_likelihood: trace,
        converged,
    })
}

/// Randomized range finder for a PCA start: loadings from the leading right
/// singular vectors, noise from the discarded variance.
fn init_loadings(residual: &DMatrix<f64>, k: usize, n_obs: f64, seed: u64) -> (DMatrix<f64>, f64) {
    let (n, v) = (residual.nrows(), residual.ncols());
    let q = (k + 8).min(n.min(v));
    let mut rng = util::rng(seed);
    let omega = DMatrix::from_fn(v, q, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut basis = (residual * omega).qr().q();
    for _ in 0..2 {
        let back = residual.tr_mul(&basis);
        basis = (residual * back).qr().q();
    }
    let small = basis.tr_mul(residual);
    let svd = small.svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));

    let per_sample = n_obs / v as f64;
    let total_var: f64 = residual.iter().map(|r| r * r).sum::<f64>() / per_sample;
    let top: Vec<f64> = order[..k]
        .iter()
        .map(|&j| svd.singular_values[j].powi(2) / per_sample)
        .collect();
    let sigma2 = ((total_var - top.iter().sum::<f64>()) / (v - k) as f64).max(1e-6);
    let mut w = DMatrix::zeros(v, k);
    for (col, (&j, &lambda)) in order[..k].iter().zip(&top).enumerate() {
        let scale = (lambda - sigma2).max(1e-6).sqrt();
        for r in 0..v {
            w[(r, col)] = v_t[(j, r)] * scale;
        }
    }
    (w, sigma2)
}

fn cholesky_inverse(m: DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    let chol = m
        .cholesky()
        .ok_or_else(|| Error::numerical("PPCA posterior precision is not positive definite"))?;
    let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Ok((chol.inverse(), log_det))
}

fn e_step(
    residual: &DMatrix<f64>,
    w: &DMatrix<f64>,
    sigma2: f64,
    held: Option<&HeldOut>,
    sum_sq: f64,
) -> Result<EStep> {
    let (n, v) = (residual.nrows(), residual.ncols());
    let k = w.ncols();
    let gram = w.tr_mul(w);
    let t = residual * w;
    let base = &gram + DMatrix::identity(k, k) * sigma2;

    let any_held = held.is_some_and(|h| h.count > 0);
    let mut z = DMatrix::zeros(n, k);
    let mut log_likelihood = 0.0;
    let m_inv: Vec<DMatrix<f64>>;
    if !any_held {
        let (inv, log_det) = cholesky_inverse(base)?;
        let zt = &t * &inv;
        let quad: f64 = t.component_mul(&zt).sum();
        log_likelihood = -0.5
            * ((n * v) as f64 * LN_2PI
                + n as f64 * ((v - k) as f64 * sigma2.ln() + log_det)
                + (sum_sq - quad) / sigma2);
        z = zt;
        m_inv = vec![inv];
    } else {
        let held = held.expect("checked above");
        let rows: Vec<(DMatrix<f64>, DVector<f64>, f64)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut m = base.clone();
                for &c in &held.by_row[i] {
                    let wc = w.row(c);
                    m -= wc.transpose() * wc;
                }
                let (inv, log_det) = cholesky_inverse(m)?;
                let ti = t.row(i).transpose();
                let zi = &inv * &ti;
                let n_o = (v - held.by_row[i].len()) as f64;
                let r2 = residual.row(i).norm_squared();
                let ll = -0.5
                    * (n_o * LN_2PI + (n_o - k as f64) * sigma2.ln() + log_det + (r2 - ti.dot(&zi)) / sigma2);
                Ok((inv, zi, ll))
            })
            .collect::<Result<_>>()?;
        let mut invs = Vec::with_capacity(n);
        for (i, (inv, zi, ll)) in rows.into_iter().enumerate() {
            z.set_row(i, &zi.transpose());
            log_likelihood += ll;
            invs.push(inv);
        }
        m_inv = invs;
    }
    Ok(EStep {
        z,
        m_inv,
        log_likelihood,
    })
}

fn m_step(
    residual: &DMatrix<f64>,
    e: &EStep,
    sigma2: f64,
    held: Option<&HeldOut>,
    sum_sq: f64,
    n_obs: f64,
) -> Result<(DMatrix<f64>, f64)> {
    let (n, v) = (residual.nrows(), residual.ncols());
    let k = e.z.ncols();
    let inv_of = |i: usize| if e.m_inv.len() == 1 { &e.m_inv[0] } else { &e.m_inv[i] };
    let second_moment = |i: usize| -> DMatrix<f64> {
        let zi = e.z.row(i);
        inv_of(i) * sigma2 + zi.transpose() * zi
    };
    // Σ_i E[z_i z_iᵀ] over all rows; per-column corrections remove held rows.
    let total = if e.m_inv.len() == 1 {
        e.m_inv[0].clone() * (sigma2 * n as f64) + e.z.tr_mul(&e.z)
    } else {
        (0..n).map(second_moment).fold(DMatrix::zeros(k, k), |acc, s| acc + s)
    };
    let numer = residual.tr_mul(&e.z); // V × k

    let cols: Vec<(DVector<f64>, f64)> = (0..v)
        .into_par_iter()
        .map(|c| {
            let mut a = total.clone();
            if let Some(h) = held {
                for &r in &h.by_col[c] {
                    a -= second_moment(r);
                }
            }
            let nc = numer.row(c).transpose();
            let chol = a
                .clone()
                .cholesky()
                .ok_or_else(|| Error::numerical("PPCA M-step system is not positive definite"))?;
            let wc = chol.solve(&nc);
            let fit = -2.0 * wc.dot(&nc) + wc.dot(&(&a * &wc));
            Ok((wc, fit))
        })
        .collect::<Result<_>>()?;
    let mut w = DMatrix::zeros(v, k);
    let mut acc = sum_sq;
    for (c, (wc, fit)) in cols.into_iter().enumerate() {
        w.set_row(c, &wc.transpose());
        acc += fit;
    }
    Ok((w, acc / n_obs))
}

/// Outcome of the held-out predictive check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictiveCheck {
    pub p_value: f64,
    pub passed: bool,
    pub n_heldout_samples: usize,
    pub per_sample: Vec<f64>,
}

/// Acceptance band for the predictive-check p-value.
pub const CHECK_BOUNDS: (f64, f64) = (0.05, 0.95);

/// Held-out posterior predictive check.
///
/// A random `holdout_fraction` of entries is hidden and the model is refit on
/// the rest with the same configuration. For every sample with hidden
/// entries, latent scores are drawn from their posterior given the observed
/// entries; each draw yields a replicated hidden block, and the sample's
/// p-value is the fraction of draws whose log-likelihood does not exceed the
/// observed block's. The check passes when the average lies in [0.05, 0.95].
pub fn predictive_check(
    model: &PpcaModel,
    ds: &Level0Dataset,
    holdout_fraction: f64,
    n_replicates: usize,
    seed: u64,
) -> Result<PredictiveCheck> {
    if n_replicates == 0 {
        return Err(Error::config("predictive check needs at least one replicate"));
    }
    if model.w.nrows() != ds.n_variables() {
        return Err(Error::data("model and dataset disagree on the number of variables"));
    }
    let y = model.standardizer.transform(ds.x());
    let held = HeldOut::random(y.nrows(), y.ncols(), holdout_fraction, derive_seed(seed, 0))?;
    let fit = fit_ppca_matrix(&y, &model.config, Some(&held))?;
    let sd = fit.sigma2.sqrt();

    let rows: Vec<usize> = (0..y.nrows()).filter(|&i| !held.by_row[i].is_empty()).collect();
    if rows.is_empty() {
        return Err(Error::config("holdout selected no samples"));
    }
    let per_sample: Vec<f64> = rows
        .par_iter()
        .map(|&i| {
            let mut rng = util::rng(derive_seed(seed, 1 + i as u64));
            let cov = fit.m_inv_row(i) * fit.sigma2;
            let chol = cov
                .cholesky()
                .ok_or_else(|| Error::numerical("posterior covariance is not positive definite"))?;
            let l = chol.l();
            let z_mean = fit.z.row(i).transpose();
            let cols = &held.by_row[i];
            let k = z_mean.len();
            let mut below = 0usize;
            for _ in 0..n_replicates {
                let eps = DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
                let z = &z_mean + &l * eps;
                let (mut t_obs, mut t_rep) = (0.0, 0.0);
                for &c in cols {
                    let mean = fit.w.row(c).transpose().dot(&z) + fit.mu[c];
                    let obs = y[(i, c)] - mean;
                    let rep: f64 = sd * rng.sample::<f64, _>(StandardNormal);
                    t_obs -= obs * obs;
                    t_rep -= rep * rep;
                }
                // Shared normalizing constants cancel in the comparison.
                if t_rep <= t_obs {
                    below += 1;
                }
            }
            Ok(below as f64 / n_replicates as f64)
        })
        .collect::<Result<_>>()?;
    let p_value = util::mean(&per_sample);
    Ok(PredictiveCheck {
        p_value,
        passed: (CHECK_BOUNDS.0..=CHECK_BOUNDS.1).contains(&p_value),
        n_heldout_samples: rows.len(),
        per_sample,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `x = W z + μ + ε` with known loadings.
    pub(crate) fn factor_data(n: usize, v: usize, k: usize, noise_sd: f64, seed: u64) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut rng = util::rng(seed);
        let w = DMatrix::from_fn(v, k, |_, _| rng.sample::<f64, _>(StandardNormal));
        let z = DMatrix::from_fn(n, k, |_, _| rng.sample::<f64, _>(StandardNormal));
        let noise = DMatrix::from_fn(n, v, |_, _| noise_sd * rng.sample::<f64, _>(StandardNormal));
        let mu = DVector::from_fn(v, |j, _| j as f64 * 0.1);
        let mut x = &z * w.transpose() + noise;
        for mut row in x.row_iter_mut() {
            row += mu.transpose();
        }
        (x, w)
    }

    fn as_dataset(x: DMatrix<f64>) -> Level0Dataset {
        let n = x.nrows();
        let names = (0..x.ncols()).map(|j| format!("v{j}")).collect();
        let y = (0..n).map(|i| (i % 2) as f64).collect();
        Level0Dataset::from_parts("f", x, y, names).unwrap()
    }

    /// Largest principal angle between column spaces of `a` and `b`.
    fn max_principal_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        let qa = a.clone().qr().q();
        let qb = b.clone().qr().q();
        let s = qa.tr_mul(&qb).svd(false, false).singular_values;
        let smallest = s.iter().cloned().fold(f64::INFINITY, f64::min).min(1.0);
        smallest.acos()
    }

    #[test]
    fn recovers_planted_subspace() {
        let (x, w_true) = factor_data(400, 30, 2, 1e-4, 1);
        let ds = as_dataset(x);
        let model = fit_ppca(&ds, &PpcaConfig { k: 2, ..PpcaConfig::default() }).unwrap();
        // Compare in the standardized coordinates the model works in.
        let scaled = DMatrix::from_fn(30, 2, |r, c| w_true[(r, c)] / model.standardizer.sd[r]);
        let angle = max_principal_angle(&model.w, &scaled);
        assert!(angle < 1e-2, "principal angle {angle}");
    }

    #[test]
    fn log_likelihood_is_monotone() {
        let (x, _) = factor_data(200, 25, 3, 0.5, 2);
        let ds = as_dataset(x);
        let model = fit_ppca(&ds, &PpcaConfig { k: 3, tol: 1e-12, max_iter: 60, ..PpcaConfig::default() }).unwrap();
        for pair in model.log_likelihood.windows(2) {
            assert!(pair[1] >= pair[0] - 1e-9 * pair[0].abs(), "{pair:?}");
        }
        assert!(model.sigma2 > 0.0);
    }

    #[test]
    fn masked_em_is_monotone() {
        let (x, _) = factor_data(150, 20, 2, 0.3, 3);
        let y = Standardizer::fit(&x).transform(&x);
        let held = HeldOut::random(150, 20, 0.1, 4).unwrap();
        let cfg = PpcaConfig { k: 2, tol: 1e-12, max_iter: 80, ..PpcaConfig::default() };
        let fit = fit_ppca_matrix(&y, &cfg, Some(&held)).unwrap();
        for pair in fit.log_likelihood.windows(2) {
            assert!(pair[1] >= pair[0] - 1e-9 * pair[0].abs(), "{pair:?}");
        }
    }

    #[test]
    fn masked_likelihood_matches_dense_formula() {
        // With nothing held out both code paths must agree.
        let (x, _) = factor_data(60, 12, 2, 0.3, 8);
        let y = Standardizer::fit(&x).transform(&x);
        let cfg = PpcaConfig { k: 2, max_iter: 5, tol: 0.0, ..PpcaConfig::default() };
        let dense = fit_ppca_matrix(&y, &cfg, None).unwrap();
        let empty = HeldOut {
            by_row: vec![vec![]; 60],
            by_col: vec![vec![]; 12],
            count: 0,
        };
        let masked = fit_ppca_matrix(&y, &cfg, Some(&empty)).unwrap();
        for (a, b) in dense.log_likelihood.iter().zip(&masked.log_likelihood) {
            assert!((a - b).abs() < 1e-8 * a.abs());
        }
    }

    #[test]
    fn k_must_be_below_min_dimension() {
        let (x, _) = factor_data(20, 8, 2, 0.3, 5);
        let ds = as_dataset(x);
        assert!(fit_ppca(&ds, &PpcaConfig { k: 8, ..PpcaConfig::default() }).is_err());
        assert!(fit_ppca(&ds, &PpcaConfig { k: 0, ..PpcaConfig::default() }).is_err());
    }

    #[test]
    fn zero_variance_column_is_named() {
        let (mut x, _) = factor_data(20, 8, 2, 0.3, 5);
        x.column_mut(3).fill(1.0);
        let err = fit_ppca(&as_dataset(x), &PpcaConfig { k: 2, ..PpcaConfig::default() })
            .unwrap_err()
            .to_string();
        assert!(err.contains("v3"), "{err}");
    }

    #[test]
    fn check_passes_well_specified_and_fails_inflated_noise() {
        let (x, _) = factor_data(200, 20, 3, 0.5, 6);
        let ds = as_dataset(x);
        let cfg = PpcaConfig { k: 3, ..PpcaConfig::default() };
        let model = fit_ppca(&ds, &cfg).unwrap();
        let check = predictive_check(&model, &ds, 0.1, 100, 7).unwrap();
        assert!(check.passed, "p = {}", check.p_value);

        let frozen = PpcaConfig { fixed_sigma2: Some(1e6), ..cfg };
        let bad = fit_ppca(&ds, &frozen).unwrap();
        let check = predictive_check(&bad, &ds, 0.1, 100, 7).unwrap();
        assert!(!check.passed, "p = {}", check.p_value);
        assert!(predictive_check(&model, &ds, 0.1, 0, 7).is_err());
    }
}
