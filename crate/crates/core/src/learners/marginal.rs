//! Univariate logistic screening: one slope per standardized variable.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use super::{binarize, BinarizeStrategy, LearnerOutput};
use crate::data::Level0Dataset;
use crate::error::Result;
use crate::util::{log1p_exp, sigmoid};

pub const LEARNER_ID: &str = "marginal";
pub const MAX_NEWTON_ITER: usize = 50;
/// Slopes beyond this are treated as separation.
const SEPARATION_SLOPE: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnivariateFit {
    pub slope: f64,
    pub intercept: f64,
    pub p_value: f64,
    pub converged: bool,
}

fn log_lik(x: &[f64], y: &[f64], b0: f64, b1: f64) -> f64 {
    x.iter()
        .zip(y)
        .map(|(&xi, &yi)| {
            let t = b0 + b1 * xi;
            yi * t - log1p_exp(t)
        })
        .sum()
}

fn chi2_1_sf(stat: f64) -> f64 {
    erfc((stat.max(0.0) / 2.0).sqrt()).clamp(0.0, 1.0)
}

/// Newton-Raphson fit of `logit P(y=1) = b0 + b1·x` with a Wald p-value.
///
/// When the iterations do not settle (separation), the Wald statistic is
/// meaningless, so the p-value comes from the likelihood-ratio test instead.
pub fn univariate_logistic(x: &[f64], y: &[f64]) -> UnivariateFit {
    let n = x.len() as f64;
    let ybar = y.iter().sum::<f64>() / n;
    let null_b0 = (ybar / (1.0 - ybar)).ln();
    let xbar = x.iter().sum::<f64>() / n;
    if x.iter().all(|&v| (v - xbar).abs() < 1e-12) {
        return UnivariateFit {
            slope: 0.0,
            intercept: null_b0,
            p_value: 1.0,
            converged: true,
        };
    }
    let (mut b0, mut b1) = (null_b0, 0.0);
    let mut ll = log_lik(x, y, b0, b1);
    let mut converged = false;
    let mut info = [0.0; 3];
    for _ in 0..MAX_NEWTON_ITER {
        let (mut g0, mut g1) = (0.0, 0.0);
        info = [0.0; 3];
        for (&xi, &yi) in x.iter().zip(y) {
            let p = sigmoid(b0 + b1 * xi);
            let w = p * (1.0 - p);
            g0 += yi - p;
            g1 += (yi - p) * xi;
            info[0] += w;
            info[1] += w * xi;
            info[2] += w * xi * xi;
        }
        let det = info[0] * info[2] - info[1] * info[1];
        if !(det > 1e-300) {
            break;
        }
        let d0 = (info[2] * g0 - info[1] * g1) / det;
        let d1 = (info[0] * g1 - info[1] * g0) / det;
        // Step halving keeps the likelihood from decreasing.
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let cand = log_lik(x, y, b0 + step * d0, b1 + step * d1);
            if cand >= ll - 1e-12 {
                b0 += step * d0;
                b1 += step * d1;
                ll = cand;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        if (step * d0).abs().max((step * d1).abs()) < 1e-10 {
            converged = b1.abs() < SEPARATION_SLOPE;
            break;
        }
        if b1.abs() > SEPARATION_SLOPE {
            break;
        }
    }
    let p_value = if converged {
        let det = info[0] * info[2] - info[1] * info[1];
        let se = (info[0] / det).sqrt();
        erfc((b1 / se).abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0)
    } else {
        chi2_1_sf(2.0 * (ll - log_lik(x, y, null_b0, 0.0)))
    };
    UnivariateFit {
        slope: b1,
        intercept: b0,
        p_value,
        converged,
    }
}

/// One univariate fit per standardized column; calls by `strategy`.
pub fn run_marginal_learner(ds: &Level0Dataset, strategy: BinarizeStrategy) -> Result<LearnerOutput> {
    let x = ds.x();
    let n = x.nrows() as f64;
    let fits: Vec<UnivariateFit> = (0..ds.n_variables())
        .into_par_iter()
        .map(|j| {
            let col = x.column(j);
            let mean = col.sum() / n;
            let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            let z: Vec<f64> = if sd > 0.0 {
                col.iter().map(|v| (v - mean) / sd).collect()
            } else {
                vec![0.0; col.len()]
            };
            univariate_logistic(&z, ds.y0())
        })
        .collect();
    let flagged: Vec<&str> = ds
        .variable_names()
        .iter()
        .zip(&fits)
        .filter(|(_, f)| !f.converged)
        .map(|(n, _)| n.as_str())
        .collect();
    let flags = if flagged.is_empty() {
        Vec::new()
    } else {
        vec![format!("max-iter:{}", flagged.join(","))]
    };
    let mut out = LearnerOutput {
        dataset_id: ds.id().to_string(),
        learner_id: LEARNER_ID.to_string(),
        variable_names: ds.variable_names().to_vec(),
        phi: fits.iter().map(|f| f.slope).collect(),
        p_values: Some(fits.iter().map(|f| f.p_value).collect()),
        causal_call: Vec::new(),
        n_bootstrap: 0,
        flags,
    };
    out.causal_call = binarize(&out, strategy)?;
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util;
    use nalgebra::DMatrix;
    use rand::Rng as _;

    #[test]
    fn constant_column_is_null() {
        let y = vec![0.0, 1.0, 1.0, 0.0];
        let fit = univariate_logistic(&[2.0; 4], &y);
        assert_eq!((fit.slope, fit.p_value), (0.0, 1.0));
    }

    #[test]
    fn perfect_separation_is_flagged() {
        let y: Vec<f64> = (0..40).map(|i| (i % 2) as f64).collect();
        let x: Vec<f64> = y.iter().map(|&v| 2.0 * v - 1.0).collect();
        let fit = univariate_logistic(&x, &y);
        assert!(!fit.converged);
        assert!(fit.slope.abs() > 5.0);
        assert!(fit.p_value < 1e-6);
    }

    #[test]
    fn matches_closed_form_for_binary_predictor() {
        // With a binary x the MLE reproduces the two cell log-odds.
        let x = [0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0];
        let y = [1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0];
        let fit = univariate_logistic(&x, &y);
        let expected = (3.0f64 / 2.0).ln() - (1.0f64 / 3.0).ln();
        assert!(fit.converged);
        assert!((fit.slope - expected).abs() < 1e-8);
    }

    #[test]
    fn null_p_values_look_uniform() {
        let mut rng = util::rng(11);
        let n = 400;
        let mut ps: Vec<f64> = (0..300)
            .map(|_| {
                let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
                let y: Vec<f64> = (0..n).map(|_| (rng.random::<f64>() < 0.4) as u8 as f64).collect();
                univariate_logistic(&x, &y).p_value
            })
            .collect();
        ps.sort_by(f64::total_cmp);
        let ks = ps
            .iter()
            .enumerate()
            .map(|(i, &p)| ((i + 1) as f64 / 300.0 - p).abs().max((p - i as f64 / 300.0).abs()))
            .fold(0.0, f64::max);
        // 1% critical value for n = 300 is about 1.63 / sqrt(300).
        assert!(ks < 1.63 / 300f64.sqrt(), "KS {ks}");
    }

    #[test]
    fn learner_output_shape() {
        let mut rng = util::rng(5);
        let x = DMatrix::from_fn(200, 20, |_, _| rng.random_range(0..3) as f64);
        let y: Vec<f64> = (0..200).map(|i| ((x[(i, 3)] + rng.random::<f64>()) > 1.5) as u8 as f64).collect();
        let names = (0..20).map(|j| format!("v{j}")).collect();
        let ds = Level0Dataset::from_parts("m", x, y, names).unwrap();
        let out = run_marginal_learner(&ds, BinarizeStrategy::top_fraction()).unwrap();
        assert_eq!(out.causal_call.iter().filter(|&&c| c).count(), 2);
        assert!(out.causal_call[3]);
        assert!(out.phi[3] > 0.0);
    }
}
