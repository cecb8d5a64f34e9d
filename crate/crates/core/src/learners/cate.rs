//! Proxy-adjusted conditional average treatment effects.
//!
//! For each variable `v` the learner contrasts two do-interventions on a
//! fitted outcome regressor that also sees the substitute confounders `Z`:
//!
//! ```text
//! φ_v = (1/J) Σ_i [ ĝ(x_i | x_iv := x̄_v + 1, z_i) − ĝ(x_i | x_iv := x̄_v, z_i) ]
//! ```
//!
//! `x̄_v + 1` is one unit above the mean on the raw covariate scale.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::bootstrap::{bootstrap_rows, BootstrapSpec};
use super::enet::{fit_outcome_model_with, select_lambda, ElasticNetConfig};
use super::{binarize, BinarizeStrategy, LearnerOutput};
use crate::data::Level0Dataset;
use crate::error::{Error, Result};
use crate::util::{sigmoid, Standardizer};

pub const LEARNER_ID: &str = "cate";

/// An outcome model that is linear in every covariate on the logit scale.
pub trait ProxyOutcomeRegressor: Sync {
    fn n_variables(&self) -> usize;
    fn n_proxies(&self) -> usize;
    /// Logit of `P(Y = 1 | x, z)`; `x` on the raw scale.
    fn logit(&self, x: &[f64], z: &[f64]) -> f64;
    /// Change in logit per unit of variable `v`.
    fn raw_slope(&self, v: usize) -> f64;

    fn probability(&self, x: &[f64], z: &[f64]) -> f64 {
        sigmoid(self.logit(x, z))
    }
}

/// Logistic regressor with coefficients on the raw covariate scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticProxyRegressor {
    pub intercept: f64,
    pub coef_x: Vec<f64>,
    pub coef_z: Vec<f64>,
}

impl LogisticProxyRegressor {
    /// Maps a model fitted on standardized `[X | Z]` back to raw units.
    pub fn from_standardized(intercept: f64, coef: &[f64], x_scale: &Standardizer, z_scale: &Standardizer) -> Self {
        let v = x_scale.mean.len();
        let mut b0 = intercept;
        let mut unscale = |b: f64, m: f64, s: f64| {
            if s > 0.0 {
                b0 -= b * m / s;
                b / s
            } else {
                0.0
            }
        };
        let coef_x: Vec<f64> = (0..v).map(|j| unscale(coef[j], x_scale.mean[j], x_scale.sd[j])).collect();
        let coef_z: Vec<f64> = (0..z_scale.mean.len())
            .map(|j| unscale(coef[v + j], z_scale.mean[j], z_scale.sd[j]))
            .collect();
        LogisticProxyRegressor {
            intercept: b0,
            coef_x,
            coef_z,
        }
    }
}

impl ProxyOutcomeRegressor for LogisticProxyRegressor {
    fn n_variables(&self) -> usize {
        self.coef_x.len()
    }

    fn n_proxies(&self) -> usize {
        self.coef_z.len()
    }

    fn logit(&self, x: &[f64], z: &[f64]) -> f64 {
        self.intercept
            + x.iter().zip(&self.coef_x).map(|(a, b)| a * b).sum::<f64>()
            + z.iter().zip(&self.coef_z).map(|(a, b)| a * b).sum::<f64>()
    }

    fn raw_slope(&self, v: usize) -> f64 {
        self.coef_x[v]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CateConfig {
    /// Outcome regressor settings; ridge by default so every variable keeps
    /// a nonzero slope.
    pub outcome: ElasticNetConfig,
    /// Averages the contrasts over subsamples when set.
    pub bootstrap: Option<BootstrapSpec>,
    pub binarize: BinarizeStrategy,
}

impl Default for CateConfig {
    fn default() -> Self {
        CateConfig {
            outcome: ElasticNetConfig {
                l1_ratio: 0.0,
                lambda_grid: vec![0.3, 0.1, 0.03, 0.01, 0.003, 0.001],
                ..ElasticNetConfig::default()
            },
            bootstrap: None,
            binarize: BinarizeStrategy::top_fraction(),
        }
    }
}

/// Fits a logistic regressor of `y0` on standardized `[X | Z]`.
pub fn fit_proxy_regressor(
    ds: &Level0Dataset,
    proxies: &DMatrix<f64>,
    cfg: &ElasticNetConfig,
) -> Result<LogisticProxyRegressor> {
    let all: Vec<usize> = (0..ds.n_samples()).collect();
    let (design, xs, zs) = standardized_design(ds.x(), proxies, &all)?;
    let lambda = match cfg.lambda {
        Some(l) => l,
        None => select_lambda(&design, ds.y0(), cfg)?,
    };
    let model = fit_outcome_model_with(&design, ds.y0(), cfg.l1_ratio, lambda, cfg.max_sweeps, cfg.tol, None)?;
    Ok(LogisticProxyRegressor::from_standardized(model.intercept, &model.coef, &xs, &zs))
}

fn standardized_design(
    x: &DMatrix<f64>,
    z: &DMatrix<f64>,
    rows: &[usize],
) -> Result<(DMatrix<f64>, Standardizer, Standardizer)> {
    if x.nrows() != z.nrows() {
        return Err(Error::data(format!(
            "{} samples but {} proxy rows",
            x.nrows(),
            z.nrows()
        )));
    }
    let xr = x.select_rows(rows);
    let zr = z.select_rows(rows);
    let xs = Standardizer::fit(&xr);
    let zs = Standardizer::fit(&zr);
    let (v, k) = (x.ncols(), z.ncols());
    let mut design = DMatrix::zeros(rows.len(), v + k);
    design.columns_mut(0, v).copy_from(&xs.transform(&xr));
    design.columns_mut(v, k).copy_from(&zs.transform(&zr));
    Ok((design, xs, zs))
}

fn row(m: &DMatrix<f64>, i: usize) -> Vec<f64> {
    m.row(i).iter().copied().collect()
}

/// Plug-in contrasts `φ_v` for every variable.
pub fn intervention_effects<R: ProxyOutcomeRegressor>(
    x: &DMatrix<f64>,
    proxies: &DMatrix<f64>,
    regressor: &R,
) -> Result<Vec<f64>> {
    let (n, v) = (x.nrows(), x.ncols());
    if regressor.n_variables() != v || regressor.n_proxies() != proxies.ncols() || proxies.nrows() != n {
        return Err(Error::data(format!(
            "regressor expects {} variables / {} proxies; data has {v} / {} (rows {n} vs {})",
            regressor.n_variables(),
            regressor.n_proxies(),
            proxies.ncols(),
            proxies.nrows()
        )));
    }
    let eta: Vec<f64> = (0..n).map(|i| regressor.logit(&row(x, i), &row(proxies, i))).collect();
    let nf = n as f64;
    let phi = (0..v)
        .into_par_iter()
        .map(|j| {
            let slope = regressor.raw_slope(j);
            if slope == 0.0 {
                return 0.0;
            }
            let col = x.column(j);
            let mean = col.sum() / nf;
            col.iter()
                .zip(&eta)
                .map(|(&xij, &e)| {
                    let at_mean = e + slope * (mean - xij);
                    sigmoid(at_mean + slope) - sigmoid(at_mean)
                })
                .sum::<f64>()
                / nf
        })
        .collect();
    Ok(phi)
}

/// Effects from an already fitted regressor, binarized by `strategy`.
pub fn run_cate_learner<R: ProxyOutcomeRegressor>(
    ds: &Level0Dataset,
    proxies: &DMatrix<f64>,
    regressor: &R,
    strategy: BinarizeStrategy,
) -> Result<LearnerOutput> {
    let phi = intervention_effects(ds.x(), proxies, regressor)?;
    let mut out = LearnerOutput {
        dataset_id: ds.id().to_string(),
        learner_id: LEARNER_ID.to_string(),
        variable_names: ds.variable_names().to_vec(),
        phi,
        p_values: None,
        causal_call: Vec::new(),
        n_bootstrap: 0,
        flags: Vec::new(),
    };
    out.causal_call = binarize(&out, strategy)?;
    out.validate()?;
    Ok(out)
}

/// Fits the regressor (optionally per subsample) and computes the contrasts.
pub fn cate_learner(ds: &Level0Dataset, proxies: &DMatrix<f64>, cfg: &CateConfig) -> Result<LearnerOutput> {
    let all: Vec<usize> = (0..ds.n_samples()).collect();
    let (design, _, _) = standardized_design(ds.x(), proxies, &all)?;
    let lambda = match cfg.outcome.lambda {
        Some(l) => l,
        None => select_lambda(&design, ds.y0(), &cfg.outcome)?,
    };
    let fixed = ElasticNetConfig {
        lambda: Some(lambda),
        ..cfg.outcome.clone()
    };
    let Some(spec) = cfg.bootstrap else {
        let regressor = fit_proxy_regressor(ds, proxies, &fixed)?;
        return run_cate_learner(ds, proxies, &regressor, cfg.binarize);
    };
    let boot = bootstrap_rows(ds.n_samples(), &spec, |rows, _| {
        let sub = ds.select_samples(rows)?;
        let z = proxies.select_rows(rows);
        let regressor = fit_proxy_regressor(&sub, &z, &fixed)?;
        intervention_effects(sub.x(), &z, &regressor)
    })?;
    let mut out = LearnerOutput {
        dataset_id: ds.id().to_string(),
        learner_id: LEARNER_ID.to_string(),
        variable_names: ds.variable_names().to_vec(),
        phi: boot.mean,
        p_values: Some(boot.p_value),
        causal_call: Vec::new(),
        n_bootstrap: spec.replicates,
        flags: Vec::new(),
    };
    out.causal_call = binarize(&out, cfg.binarize)?;
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util;
    use rand::Rng as _;

    fn toy_dataset(n: usize, v: usize, seed: u64) -> (Level0Dataset, DMatrix<f64>) {
        let mut rng = util::rng(seed);
        let x = DMatrix::from_fn(n, v, |_, _| rng.random_range(0..3) as f64);
        let z = DMatrix::from_fn(n, 2, |_, _| rng.random::<f64>() - 0.5);
        let y = (0..n).map(|i| (i % 3 == 0) as u8 as f64).collect();
        let names = (0..v).map(|j| format!("g{j}")).collect();
        (Level0Dataset::from_parts("c", x, y, names).unwrap(), z)
    }

    /// Per-sample loop that only uses the regressor's `probability`.
    fn loop_oracle<R: ProxyOutcomeRegressor>(x: &DMatrix<f64>, z: &DMatrix<f64>, r: &R) -> Vec<f64> {
        let (n, v) = (x.nrows(), x.ncols());
        (0..v)
            .map(|j| {
                let mean = x.column(j).sum() / n as f64;
                let mut acc = 0.0;
                for i in 0..n {
                    let zi = row(z, i);
                    let mut hi = row(x, i);
                    hi[j] = mean + 1.0;
                    let mut lo = row(x, i);
                    lo[j] = mean;
                    acc += r.probability(&hi, &zi) - r.probability(&lo, &zi);
                }
                acc / n as f64
            })
            .collect()
    }

    #[test]
    fn zero_weight_gives_zero_effect() {
        let (ds, z) = toy_dataset(30, 4, 1);
        let r = LogisticProxyRegressor {
            intercept: 0.2,
            coef_x: vec![0.5, 0.0, -1.0, 0.3],
            coef_z: vec![1.0, -1.0],
        };
        let out = run_cate_learner(&ds, &z, &r, BinarizeStrategy::top_fraction()).unwrap();
        assert_eq!(out.phi[1], 0.0);
    }

    #[test]
    fn single_variable_closed_form() {
        let x = DMatrix::from_column_slice(4, 1, &[-1.0, 1.0, -2.0, 2.0]);
        let z = DMatrix::zeros(4, 0);
        let r = LogisticProxyRegressor {
            intercept: 0.0,
            coef_x: vec![1.0],
            coef_z: vec![],
        };
        let phi = intervention_effects(&x, &z, &r).unwrap();
        assert!((phi[0] - (sigmoid(1.0) - sigmoid(0.0))).abs() < 1e-15);
        assert!((phi[0] - 0.2311).abs() < 1e-4);
    }

    #[test]
    fn vectorized_matches_loop_oracle() {
        let (ds, z) = toy_dataset(40, 6, 2);
        let mut rng = util::rng(3);
        let r = LogisticProxyRegressor {
            intercept: -0.4,
            coef_x: (0..6).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect(),
            coef_z: vec![0.7, -0.2],
        };
        let fast = intervention_effects(ds.x(), &z, &r).unwrap();
        let slow = loop_oracle(ds.x(), &z, &r);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let (ds, z) = toy_dataset(10, 3, 4);
        let r = LogisticProxyRegressor {
            intercept: 0.0,
            coef_x: vec![1.0; 2],
            coef_z: vec![0.0; 2],
        };
        assert!(run_cate_learner(&ds, &z, &r, BinarizeStrategy::top_fraction()).is_err());
    }

    #[test]
    fn standardized_coefficients_map_to_raw_scale() {
        let (ds, z) = toy_dataset(50, 3, 5);
        let all: Vec<usize> = (0..50).collect();
        let (design, xs, zs) = standardized_design(ds.x(), &z, &all).unwrap();
        let coef = vec![0.3, -0.2, 0.1, 0.5, -0.4];
        let r = LogisticProxyRegressor::from_standardized(0.25, &coef, &xs, &zs);
        for i in 0..50 {
            let std_logit: f64 = 0.25 + (0..5).map(|j| design[(i, j)] * coef[j]).sum::<f64>();
            let raw_logit = r.logit(&row(ds.x(), i), &row(&z, i));
            assert!((std_logit - raw_logit).abs() < 1e-12);
        }
    }
}
