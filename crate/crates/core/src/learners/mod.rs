//! Level-0 causal learners.
//!
//! Each learner maps a [`Level0Dataset`](crate::data::Level0Dataset) to one
//! effect estimate per variable plus a binary causal call:
//!
//! - [`deconfounder`]: PPCA substitute confounders, gated by a held-out
//!   predictive check, and a bootstrapped elastic-net outcome model; calls by
//!   significance.
//! - [`cate`]: plug-in do-intervention contrasts from an outcome regressor
//!   that conditions on the substitute confounders; calls the top 10%.
//! - [`marginal`]: univariate logistic slopes with Wald p-values; calls the
//!   top 10%.

pub mod bootstrap;
pub mod cate;
pub mod deconfounder;
pub mod enet;
pub mod marginal;
pub mod ppca;

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::error::{Error, Result};
use crate::util::ceil_fraction;

/// Default share of variables called causal by effect-only learners.
pub const DEFAULT_TOP_FRACTION: f64 = 0.10;
/// Default significance level for bootstrap-tested learners.
pub const DEFAULT_ALPHA: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerOutput {
    pub dataset_id: String,
    pub learner_id: String,
    pub variable_names: Vec<String>,
    pub phi: Vec<f64>,
    pub p_values: Option<Vec<f64>>,
    pub causal_call: Vec<bool>,
    pub n_bootstrap: usize,
    /// Solver diagnostics worth surfacing (non-convergence, separation, ...).
    #[serde(default)]
    pub flags: Vec<String>,
}

impl LearnerOutput {
    pub fn n_variables(&self) -> usize {
        self.phi.len()
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.variable_names.len();
        if self.phi.len() != v || self.causal_call.len() != v {
            return Err(Error::data(format!(
                "learner output {}/{}: lengths disagree",
                self.dataset_id, self.learner_id
            )));
        }
        if self.phi.iter().any(|p| !p.is_finite()) {
            return Err(Error::numerical(format!(
                "learner output {}/{}: non-finite effect estimate",
                self.dataset_id, self.learner_id
            )));
        }
        if let Some(p) = &self.p_values {
            if p.len() != v || p.iter().any(|x| !(0.0..=1.0).contains(x)) {
                return Err(Error::data(format!(
                    "learner output {}/{}: invalid p-values",
                    self.dataset_id, self.learner_id
                )));
            }
        }
        Ok(())
    }

    /// Recomputes `causal_call` with the given rule.
    pub fn with_calls(mut self, strategy: BinarizeStrategy) -> Result<Self> {
        self.causal_call = binarize(&self, strategy)?;
        Ok(self)
    }
}

/// Rule turning effect estimates into causal calls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case", deny_unknown_fields)]
pub enum BinarizeStrategy {
    /// Call variables whose zero-test p-value is at most `alpha`.
    Significance { alpha: f64 },
    /// Call the `⌈fraction · V⌉` largest `|φ|`; ties go to the lower index.
    TopFraction { fraction: f64 },
}

impl BinarizeStrategy {
    pub fn significance() -> Self {
        BinarizeStrategy::Significance { alpha: DEFAULT_ALPHA }
    }

    pub fn top_fraction() -> Self {
        BinarizeStrategy::TopFraction {
            fraction: DEFAULT_TOP_FRACTION,
        }
    }
}

pub fn binarize(output: &LearnerOutput, strategy: BinarizeStrategy) -> Result<Vec<bool>> {
    match strategy {
        BinarizeStrategy::Significance { alpha } => {
            let p = output.p_values.as_ref().ok_or_else(|| {
                Error::config(format!(
                    "learner {} has no p-values; significance calls are unavailable",
                    output.learner_id
                ))
            })?;
            Ok(p.iter().map(|&p| p <= alpha).collect())
        }
        BinarizeStrategy::TopFraction { fraction } => {
            if !(fraction > 0.0 && fraction < 1.0) {
                return Err(Error::config(format!("top fraction {fraction} outside (0, 1)")));
            }
            Ok(top_fraction_calls(&output.phi, fraction))
        }
    }
}

pub(crate) fn top_fraction_calls(phi: &[f64], fraction: f64) -> Vec<bool> {
    let n_call = ceil_fraction(fraction, phi.len()).min(phi.len());
    let mut order: Vec<usize> = (0..phi.len()).collect();
    // Stable sort keeps lower indices first among equal magnitudes.
    order.sort_by(|&a, &b| phi[b].abs().total_cmp(&phi[a].abs()));
    let mut calls = vec![false; phi.len()];
    for &i in &order[..n_call] {
        calls[i] = true;
    }
    calls
}

/// Writes `variable,phi,p_value,causal_call` with a provenance comment line.
pub fn write_learner_output(output: &LearnerOutput, path: impl AsRef<Path>, provenance: &[(&str, String)]) -> Result<()> {
    let mut meta: Vec<(&str, String)> = vec![
        ("dataset_id", output.dataset_id.clone()),
        ("learner_id", output.learner_id.clone()),
        ("n_bootstrap", output.n_bootstrap.to_string()),
        ("flags", output.flags.join(";").replace(' ', "_")),
    ];
    meta.extend(provenance.iter().cloned());
    let mut w = artifact::csv_writer(path, &meta)?;
    w.write_record(["variable", "phi", "p_value", "causal_call"])?;
    for (i, name) in output.variable_names.iter().enumerate() {
        let p = output
            .p_values
            .as_ref()
            .map(|p| format!("{}", p[i]))
            .unwrap_or_default();
        w.write_record([
            name.clone(),
            format!("{}", output.phi[i]),
            p,
            (output.causal_call[i] as u8).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_learner_output(path: impl AsRef<Path>) -> Result<(LearnerOutput, HashMap<String, String>)> {
    let path = path.as_ref();
    let meta = artifact::read_header(path)?;
    let field = |k: &str| {
        meta.get(k)
            .cloned()
            .ok_or_else(|| Error::data(format!("{} lacks `{k}` in its header", path.display())))
    };
    let mut reader = artifact::csv_reader(path)?;
    let mut names = Vec::new();
    let mut phi = Vec::new();
    let mut p_values = Vec::new();
    let mut calls = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| Error::data(format!("{}: bad number in row {:?}", path.display(), rec)))
        };
        names.push(rec.get(0).unwrap_or("").to_string());
        phi.push(num(1)?);
        let p = rec.get(2).unwrap_or("");
        p_values.push(if p.is_empty() { None } else { Some(num(2)?) });
        calls.push(rec.get(3) == Some("1"));
    }
    let p_values = if p_values.iter().all(Option::is_some) && !p_values.is_empty() {
        Some(p_values.into_iter().map(|p| p.expect("checked")).collect())
    } else {
        None
    };
    let flags = field("flags")?;
    let out = LearnerOutput {
        dataset_id: field("dataset_id")?,
        learner_id: field("learner_id")?,
        variable_names: names,
        phi,
        p_values,
        causal_call: calls,
        n_bootstrap: field("n_bootstrap")?.parse().unwrap_or(0),
        flags: flags.split(';').filter(|s| !s.is_empty()).map(str::to_string).collect(),
    };
    out.validate()?;
    Ok((out, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn output(phi: Vec<f64>, p: Option<Vec<f64>>) -> LearnerOutput {
        let v = phi.len();
        LearnerOutput {
            dataset_id: "d".into(),
            learner_id: "l".into(),
            variable_names: (0..v).map(|i| format!("v{i}")).collect(),
            phi,
            p_values: p,
            causal_call: vec![false; v],
            n_bootstrap: 0,
            flags: vec![],
        }
    }

    #[test]
    fn top_fraction_single_max() {
        let mut phi = vec![1.0; 10];
        phi[0] = 9.0;
        let calls = binarize(&output(phi, None), BinarizeStrategy::top_fraction()).unwrap();
        assert_eq!(calls.iter().filter(|&&c| c).count(), 1);
        assert!(calls[0]);
    }

    #[test]
    fn top_fraction_ties_go_to_lower_index() {
        let phi = vec![0.5, 2.0, -2.0, 2.0, 0.1, 0.0, 0.0, 0.0, 0.0, 0.0];
        let strat = BinarizeStrategy::TopFraction { fraction: 0.2 };
        let a = binarize(&output(phi.clone(), None), strat).unwrap();
        let b = binarize(&output(phi, None), strat).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.iter().positions(), vec![1, 2]);
    }

    #[test]
    fn significance_rules() {
        let out = output(vec![1.0; 4], Some(vec![1.0; 4]));
        assert!(binarize(&out, BinarizeStrategy::significance()).unwrap().iter().all(|&c| !c));
        let out = output(vec![1.0; 3], Some(vec![0.05, 0.04, 0.5]));
        assert_eq!(binarize(&out, BinarizeStrategy::significance()).unwrap(), vec![true, true, false]);
        let out = output(vec![1.0; 3], None);
        assert!(binarize(&out, BinarizeStrategy::significance()).is_err());
        assert!(binarize(&out, BinarizeStrategy::TopFraction { fraction: 1.0 }).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let mut out = output(vec![0.25, -1.5, 0.0], Some(vec![0.0, 0.5, 1.0]));
        out.causal_call = vec![true, false, false];
        out.flags = vec!["max-iter".into()];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lo.csv");
        write_learner_output(&out, &path, &[("config_hash", "abc".into())]).unwrap();
        let (back, meta) = read_learner_output(&path).unwrap();
        assert_eq!(back, out);
        assert_eq!(meta["config_hash"], "abc");
    }

    trait Positions {
        fn positions(self) -> Vec<usize>;
    }
    impl<'a, I: Iterator<Item = &'a bool>> Positions for I {
        fn positions(self) -> Vec<usize> {
            self.enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
        }
    }
}
