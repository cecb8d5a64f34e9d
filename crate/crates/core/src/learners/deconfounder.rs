//! The deconfounder learner.
//!
//! 1. Fit PPCA on the standardized covariates; its posterior means `Z` stand
//!    in for the unobserved confounders.
//! 2. Refit on a copy with held-out entries and run the predictive check. A
//!    failing check aborts the learner.
//! 3. Regress `y0` on `[X | Z]` with an elastic-net logistic model, once per
//!    bootstrap subsample; `φ_v` is the mean coefficient of variable `v`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::bootstrap::{bootstrap_rows, subsample_size, BootstrapSpec};
use super::enet::{fit_outcome_model_with, select_lambda, ElasticNetConfig, OutcomeModel};
use super::ppca::{fit_ppca, predictive_check, PpcaConfig, PpcaModel, PredictiveCheck, CHECK_BOUNDS};
use super::{binarize, BinarizeStrategy, LearnerOutput};
use crate::data::Level0Dataset;
use crate::error::{Error, Result};
use crate::util::{derive_named, Standardizer};

pub const LEARNER_ID: &str = "deconfounder";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeconfounderConfig {
    pub ppca: PpcaConfig,
    pub check_holdout: f64,
    pub check_replicates: usize,
    /// Treat a failing predictive check as an error (the default).
    pub enforce_check: bool,
    pub outcome: ElasticNetConfig,
    pub bootstrap: BootstrapSpec,
    pub binarize: BinarizeStrategy,
    pub seed: u64,
}

impl Default for DeconfounderConfig {
    fn default() -> Self {
        DeconfounderConfig {
            ppca: PpcaConfig::default(),
            check_holdout: 0.1,
            check_replicates: 100,
            enforce_check: true,
            outcome: ElasticNetConfig::default(),
            bootstrap: BootstrapSpec::default(),
            binarize: BinarizeStrategy::significance(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DeconfounderFit {
    pub output: LearnerOutput,
    pub ppca: PpcaModel,
    pub check: PredictiveCheck,
    /// Full-sample outcome model at the selected penalty.
    pub outcome: OutcomeModel,
}

impl DeconfounderFit {
    /// Substitute confounders, `J × k`.
    pub fn proxies(&self) -> &DMatrix<f64> {
        &self.ppca.z
    }
}

/// `[X_std | Z_std]`.
pub fn augmented_design(x: &DMatrix<f64>, z: &DMatrix<f64>) -> DMatrix<f64> {
    let xs = Standardizer::fit(x).transform(x);
    let zs = Standardizer::fit(z).transform(z);
    let (v, k) = (x.ncols(), z.ncols());
    let mut design = DMatrix::zeros(x.nrows(), v + k);
    design.columns_mut(0, v).copy_from(&xs);
    design.columns_mut(v, k).copy_from(&zs);
    design
}

/// Fits the factor model and runs the predictive check only.
pub fn fit_and_check(ds: &Level0Dataset, cfg: &DeconfounderConfig) -> Result<(PpcaModel, PredictiveCheck)> {
    let ppca_cfg = PpcaConfig {
        seed: derive_named(cfg.seed, "ppca"),
        ..cfg.ppca.clone()
    };
    let model = fit_ppca(ds, &ppca_cfg)?;
    let check = predictive_check(
        &model,
        ds,
        cfg.check_holdout,
        cfg.check_replicates,
        derive_named(cfg.seed, "check"),
    )?;
    Ok((model, check))
}

pub fn run_da_learner(ds: &Level0Dataset, cfg: &DeconfounderConfig) -> Result<DeconfounderFit> {
    check_subsample(ds, cfg.ppca.k)?;
    let (ppca, check) = fit_and_check(ds, cfg)?;
    run_da_with_factor(ds, cfg, ppca, check)
}

fn check_subsample(ds: &Level0Dataset, k: usize) -> Result<()> {
    let sub = subsample_size(ds.n_samples());
    if sub < 2 * k {
        return Err(Error::data(format!(
            "subsamples of {sub} rows are too small for a {k}-factor model"
        )));
    }
    Ok(())
}

/// Outcome-model stage for an already fitted and checked factor model.
pub fn run_da_with_factor(
    ds: &Level0Dataset,
    cfg: &DeconfounderConfig,
    ppca: PpcaModel,
    check: PredictiveCheck,
) -> Result<DeconfounderFit> {
    check_subsample(ds, ppca.k())?;
    if !check.passed && cfg.enforce_check {
        return Err(Error::PredictiveCheckFailed {
            p_value: check.p_value,
            lower: CHECK_BOUNDS.0,
            upper: CHECK_BOUNDS.1,
        });
    }

    let design = augmented_design(ds.x(), &ppca.z);
    let y = ds.y0();
    let lambda = match cfg.outcome.lambda {
        Some(l) => l,
        None => select_lambda(
            &design,
            y,
            &ElasticNetConfig {
                seed: derive_named(cfg.seed, "cv"),
                ..cfg.outcome.clone()
            },
        )?,
    };
    let (l1, sweeps, tol) = (cfg.outcome.l1_ratio, cfg.outcome.max_sweeps, cfg.outcome.tol);
    let full = fit_outcome_model_with(&design, y, l1, lambda, sweeps, tol, None)?;

    let v = ds.n_variables();
    let spec = BootstrapSpec {
        seed: derive_named(cfg.seed, "bootstrap"),
        ..cfg.bootstrap
    };
    let unconverged = std::sync::atomic::AtomicUsize::new(0);
    let boot = bootstrap_rows(ds.n_samples(), &spec, |rows, _| {
        let xb = design.select_rows(rows);
        let yb: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
        let m = fit_outcome_model_with(&xb, &yb, l1, lambda, sweeps, tol, Some((full.intercept, &full.coef)))?;
        if !m.converged {
            unconverged.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        }
        Ok(m.coef[..v].to_vec())
    })?;

    let mut flags = Vec::new();
    if !ppca.converged {
        flags.push("ppca-max-iter".to_string());
    }
    if !check.passed {
        flags.push(format!("predictive-check-failed:{:.4}", check.p_value));
    }
    let n_bad = unconverged.into_inner() + usize::from(!full.converged);
    if n_bad > 0 {
        flags.push(format!("outcome-max-iter:{n_bad}"));
    }
    let mut output = LearnerOutput {
        dataset_id: ds.id().to_string(),
        learner_id: LEARNER_ID.to_string(),
        variable_names: ds.variable_names().to_vec(),
        phi: boot.mean,
        p_values: Some(boot.p_value),
        causal_call: Vec::new(),
        n_bootstrap: spec.replicates,
        flags,
    };
    output.causal_call = binarize(&output, cfg.binarize)?;
    output.validate()?;
    Ok(DeconfounderFit {
        output,
        ppca,
        check,
        outcome: full,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{simulate_dataset, SimConfig};
    use crate::util;
    use rand::seq::SliceRandom;

    fn small_cfg(k: usize) -> DeconfounderConfig {
        DeconfounderConfig {
            ppca: PpcaConfig {
                k,
                max_iter: 100,
                ..PpcaConfig::default()
            },
            check_replicates: 50,
            bootstrap: BootstrapSpec { replicates: 20, seed: 0 },
            seed: 4,
            ..DeconfounderConfig::default()
        }
    }

    fn sim(strength: f64, seed: u64) -> (Level0Dataset, crate::sim::SimulatedTruth) {
        simulate_dataset(&SimConfig {
            n_individuals: 600,
            n_snps: 100,
            confounder_strength: strength,
            effect_sd: 1.0,
            seed,
            ..SimConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn top_effects_have_the_right_sign() {
        let (ds, truth) = sim(0.0, 21);
        let fit = run_da_learner(&ds, &small_cfg(3)).unwrap();
        let mut order: Vec<usize> = (0..truth.beta.len()).collect();
        order.sort_by(|&a, &b| truth.beta[b].abs().total_cmp(&truth.beta[a].abs()));
        let top = &order[..truth.beta.len() / 10];
        let agree = top
            .iter()
            .filter(|&&v| fit.output.phi[v].signum() == truth.beta[v].signum())
            .count();
        assert!(agree as f64 >= 0.8 * top.len() as f64, "{agree}/{}", top.len());
    }

    #[test]
    fn permuted_outcome_is_rarely_called() {
        let (ds, _) = sim(0.0, 22);
        let mut y = ds.y0().to_vec();
        y.shuffle(&mut util::rng(1));
        let null = ds.with_outcome(y).unwrap();
        let fit = run_da_learner(&null, &small_cfg(3)).unwrap();
        let rate = fit.output.causal_call.iter().filter(|&&c| c).count() as f64 / 100.0;
        assert!(rate <= 0.10, "call rate {rate}");
    }

    #[test]
    fn failing_check_aborts() {
        let (ds, _) = sim(1.0, 23);
        let mut cfg = small_cfg(3);
        cfg.ppca.fixed_sigma2 = Some(1e6);
        match run_da_learner(&ds, &cfg) {
            Err(Error::PredictiveCheckFailed { .. }) => {}
            other => panic!("expected a check failure, got {other:?}"),
        }
    }

    #[test]
    fn too_few_samples_for_k() {
        let (ds, _) = sim(1.0, 24);
        let rows: Vec<usize> = (0..20).collect();
        let tiny = ds.select_samples(&rows);
        if let Ok(tiny) = tiny {
            assert!(run_da_learner(&tiny, &small_cfg(15)).is_err());
        }
    }
}
