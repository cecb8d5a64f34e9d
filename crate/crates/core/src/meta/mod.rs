//! Level-1 meta-learners.
//!
//! Every classifier sees only training rows of a split [`Level1Dataset`] and
//! predicts from features alone, so test labels cannot leak into predictions.

pub mod forest;
pub mod logistic;
pub mod mlp;
pub mod pu;
pub mod te;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::error::{Error, Result};
use crate::stack::{FeatureTransform, Level1Dataset};
use crate::util::{self, derive_named, derive_seed};
use forest::{fit_forest, Forest, ForestConfig};
use logistic::{balanced_weights, fit_logistic, LogisticModel};
use mlp::{fit_mlp, Mlp, MlpConfig};
use pu::{fit_adapter_pu, fit_upu, resolve_prior, AdapterPu, AdapterPuConfig, UpuConfig, UpuModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MetaKind {
    #[serde(rename = "LR")]
    Lr,
    #[serde(rename = "RF")]
    Rf,
    #[serde(rename = "NN")]
    Nn,
    #[serde(rename = "AdapterPU")]
    AdapterPu,
    #[serde(rename = "UPU")]
    Upu,
    Ensemble,
    Random,
}

impl MetaKind {
    pub const ALL: [MetaKind; 7] = [
        MetaKind::Lr,
        MetaKind::Rf,
        MetaKind::Nn,
        MetaKind::AdapterPu,
        MetaKind::Upu,
        MetaKind::Ensemble,
        MetaKind::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MetaKind::Lr => "LR",
            MetaKind::Rf => "RF",
            MetaKind::Nn => "NN",
            MetaKind::AdapterPu => "AdapterPU",
            MetaKind::Upu => "UPU",
            MetaKind::Ensemble => "Ensemble",
            MetaKind::Random => "Random",
        }
    }
}

impl fmt::Display for MetaKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetaKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MetaKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config(format!("unknown meta-learner `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrConfig {
    pub l2: f64,
    /// Reweight classes to equal total weight.
    pub balanced: bool,
}

impl Default for LrConfig {
    fn default() -> Self {
        LrConfig { l2: 1e-3, balanced: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    pub kinds: Vec<MetaKind>,
    pub threshold: f64,
    pub lr: LrConfig,
    pub rf: ForestConfig,
    pub nn: MlpConfig,
    pub adapter_pu: AdapterPuConfig,
    pub upu: UpuConfig,
    pub ensemble_members: Vec<MetaKind>,
    pub features: FeatureTransform,
    pub seed: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            kinds: MetaKind::ALL.to_vec(),
            threshold: 0.5,
            lr: LrConfig::default(),
            rf: ForestConfig::default(),
            nn: MlpConfig::default(),
            adapter_pu: AdapterPuConfig::default(),
            upu: UpuConfig::default(),
            ensemble_members: vec![
                MetaKind::Lr,
                MetaKind::Rf,
                MetaKind::Nn,
                MetaKind::AdapterPu,
                MetaKind::Upu,
            ],
            features: FeatureTransform::default(),
            seed: 0,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kinds.is_empty() {
            return Err(Error::config("at least one meta-learner is required"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        if self.kinds.contains(&MetaKind::Ensemble) {
            if self.ensemble_members.len() < 3 {
                return Err(Error::config("the ensemble needs at least 3 members"));
            }
            if self.ensemble_members.iter().any(|k| matches!(k, MetaKind::Ensemble | MetaKind::Random)) {
                return Err(Error::config("ensemble members must be trained classifiers"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MetaParams {
    Lr(LogisticModel),
    Rf(Forest),
    Nn(Mlp),
    AdapterPu(AdapterPu),
    Upu(UpuModel),
    Ensemble { members: Vec<MetaModel> },
    Random { rate: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaModel {
    pub kind: MetaKind,
    pub params: MetaParams,
    pub threshold: f64,
    pub train_seed: u64,
    pub warnings: Vec<String>,
}

impl MetaModel {
    /// Scores in `[0, 1]` for each row of `x`.
    pub fn scores(&self, x: &DMatrix<f64>) -> Vec<f64> {
        match &self.params {
            MetaParams::Lr(m) => m.predict_proba(x),
            MetaParams::Rf(f) => f.predict_proba(x),
            MetaParams::Nn(n) => n.predict_proba(x),
            MetaParams::AdapterPu(a) => a.predict_proba(x),
            MetaParams::Upu(u) => u.predict_proba(x),
            MetaParams::Ensemble { members } => {
                let calls: Vec<Vec<bool>> = members.iter().map(|m| m.predict(x)).collect();
                (0..x.nrows())
                    .map(|i| calls.iter().filter(|c| c[i]).count() as f64 / calls.len() as f64)
                    .collect()
            }
            MetaParams::Random { .. } => (0..x.nrows())
                .map(|i| util::rng(derive_seed(self.train_seed, i as u64)).random::<f64>())
                .collect(),
        }
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<bool> {
        match &self.params {
            MetaParams::Ensemble { members } => {
                let calls: Vec<Vec<bool>> = members.iter().map(|m| m.predict(x)).collect();
                ensemble_vote(&calls).expect("members share rows")
            }
            MetaParams::Random { rate } => self.scores(x).into_iter().map(|u| u < *rate).collect(),
            _ => self.scores(x).into_iter().map(|s| s >= self.threshold).collect(),
        }
    }

    /// Estimated label frequency for Adapter-PU.
    pub fn label_frequency(&self) -> Option<f64> {
        match &self.params {
            MetaParams::AdapterPu(a) => Some(a.calibration.c),
            _ => None,
        }
    }

    pub fn prior(&self) -> Option<f64> {
        match &self.params {
            MetaParams::Upu(u) => Some(u.prior),
            _ => None,
        }
    }
}

/// Majority of member calls; an even split goes to 0.
pub fn ensemble_vote(calls: &[Vec<bool>]) -> Result<Vec<bool>> {
    let Some(first) = calls.first() else {
        return Err(Error::config("ensemble vote needs members"));
    };
    if calls.iter().any(|c| c.len() != first.len()) {
        return Err(Error::data("ensemble members predict different rows"));
    }
    Ok((0..first.len())
        .map(|i| 2 * calls.iter().filter(|c| c[i]).count() > calls.len())
        .collect())
}

fn train_design(l1: &Level1Dataset, cfg: &MetaConfig) -> Result<(DMatrix<f64>, Vec<bool>)> {
    let x = l1.features(cfg.features)?;
    let train = &l1.split()?.train;
    let y = l1.train_labels()?;
    if !y.iter().any(|&v| v) || y.iter().all(|&v| v) {
        return Err(Error::data("single-class training labels"));
    }
    Ok((x.select_rows(train), y))
}

/// Fits one meta-learner on the training rows of `l1`.
pub fn fit_classifier(kind: MetaKind, l1: &Level1Dataset, cfg: &MetaConfig) -> Result<MetaModel> {
    cfg.validate()?;
    let (x, y) = train_design(l1, cfg)?;
    fit_on(kind, &x, &y, cfg)
}

fn fit_on(kind: MetaKind, x: &DMatrix<f64>, y: &[bool], cfg: &MetaConfig) -> Result<MetaModel> {
    let seed = derive_named(cfg.seed, kind.name());
    let mut warnings = Vec::new();
    let weights = |balanced: bool| {
        if balanced {
            balanced_weights(y)
        } else {
            vec![1.0; y.len()]
        }
    };
    let params = match kind {
        MetaKind::Lr => {
            let w = weights(cfg.lr.balanced);
            let m = fit_logistic(x, y, Some(&w), cfg.lr.l2)?;
            if !m.converged {
                warnings.push("LR did not converge".into());
            }
            MetaParams::Lr(m)
        }
        MetaKind::Rf => MetaParams::Rf(fit_forest(x, y, &weights(cfg.rf.balanced), &cfg.rf, seed)?),
        MetaKind::Nn => MetaParams::Nn(fit_mlp(x, y, &weights(cfg.nn.balanced), &cfg.nn, seed)?),
        MetaKind::AdapterPu => MetaParams::AdapterPu(fit_adapter_pu(x, y, &cfg.adapter_pu, seed)?),
        MetaKind::Upu => {
            let c = if cfg.upu.prior.is_none() {
                Some(pu::estimate_label_frequency(x, y, &cfg.adapter_pu, seed)?.c)
            } else {
                None
            };
            let rate = y.iter().filter(|&&v| v).count() as f64 / y.len() as f64;
            let (prior, w) = resolve_prior(&cfg.upu, rate, c)?;
            warnings.extend(w);
            MetaParams::Upu(fit_upu(x, y, prior, &cfg.upu)?)
        }
        MetaKind::Ensemble => {
            let members = cfg
                .ensemble_members
                .par_iter()
                .map(|&k| fit_on(k, x, y, cfg))
                .collect::<Result<Vec<_>>>()?;
            MetaParams::Ensemble { members }
        }
        MetaKind::Random => MetaParams::Random {
            rate: y.iter().filter(|&&v| v).count() as f64 / y.len() as f64,
        },
    };
    Ok(MetaModel {
        kind,
        params,
        threshold: cfg.threshold,
        train_seed: seed,
        warnings,
    })
}

/// Fits every configured kind in parallel, in `cfg.kinds` order. The
/// ensemble reuses already fitted members when they are among the kinds.
pub fn fit_all(l1: &Level1Dataset, cfg: &MetaConfig) -> Result<Vec<MetaModel>> {
    cfg.validate()?;
    let (x, y) = train_design(l1, cfg)?;
    let singles: Vec<MetaKind> = cfg.kinds.iter().copied().filter(|&k| k != MetaKind::Ensemble).collect();
    let fitted = singles
        .par_iter()
        .map(|&k| fit_on(k, &x, &y, cfg).map_err(|e| e.context(k.name())))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(cfg.kinds.len());
    for &k in &cfg.kinds {
        if k == MetaKind::Ensemble {
            let mut members = Vec::new();
            for &m in &cfg.ensemble_members {
                match fitted.iter().find(|f| f.kind == m) {
                    Some(f) => members.push(f.clone()),
                    None => members.push(fit_on(m, &x, &y, cfg)?),
                }
            }
            out.push(MetaModel {
                kind: k,
                params: MetaParams::Ensemble { members },
                threshold: cfg.threshold,
                train_seed: derive_named(cfg.seed, k.name()),
                warnings: Vec::new(),
            });
        } else {
            out.push(fitted.iter().find(|f| f.kind == k).expect("fitted above").clone());
        }
    }
    Ok(out)
}

/// Scores and calls of each model on the test rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub variables: Vec<String>,
    /// Level-1 row index of each test variable.
    pub rows: Vec<usize>,
    pub models: Vec<String>,
    pub scores: Vec<Vec<f64>>,
    pub calls: Vec<Vec<bool>>,
    /// Effect estimates of the meta-regressor (simulation mode).
    pub te_estimate: Option<Vec<f64>>,
}

pub fn predict_test(models: &[MetaModel], l1: &Level1Dataset, features: FeatureTransform) -> Result<Predictions> {
    let test = l1.split()?.test.clone();
    let x = l1.features(features)?.select_rows(&test);
    Ok(Predictions {
        variables: test.iter().map(|&i| l1.variable_names[i].clone()).collect(),
        rows: test,
        models: models.iter().map(|m| m.kind.name().to_string()).collect(),
        scores: models.iter().map(|m| m.scores(&x)).collect(),
        calls: models.iter().map(|m| m.predict(&x)).collect(),
        te_estimate: None,
    })
}

pub fn write_predictions(p: &Predictions, path: impl AsRef<Path>, provenance: &[(&str, String)]) -> Result<()> {
    let mut w = artifact::csv_writer(path, provenance)?;
    let mut header = vec!["variable".to_string(), "row".to_string()];
    for m in &p.models {
        header.push(format!("{m}_score"));
        header.push(format!("{m}_call"));
    }
    if p.te_estimate.is_some() {
        header.push("te_estimate".into());
    }
    w.write_record(&header)?;
    for (r, name) in p.variables.iter().enumerate() {
        let mut rec = vec![name.clone(), p.rows[r].to_string()];
        for m in 0..p.models.len() {
            rec.push(format!("{}", p.scores[m][r]));
            rec.push((p.calls[m][r] as u8).to_string());
        }
        if let Some(te) = &p.te_estimate {
            rec.push(format!("{}", te[r]));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Predictions> {
    let path = path.as_ref();
    let mut reader = artifact::csv_reader(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let has_te = header.last().map(|h| h == "te_estimate").unwrap_or(false);
    let n_models = (header.len() - 2 - has_te as usize) / 2;
    let models: Vec<String> = (0..n_models)
        .map(|m| header[2 + 2 * m].trim_end_matches("_score").to_string())
        .collect();
    let bad = |what: &str| Error::data(format!("{}: bad {what}", path.display()));
    let mut p = Predictions {
        variables: Vec::new(),
        rows: Vec::new(),
        models,
        scores: vec![Vec::new(); n_models],
        calls: vec![Vec::new(); n_models],
        te_estimate: has_te.then(Vec::new),
    };
    for rec in reader.records() {
        let rec = rec?;
        p.variables.push(rec[0].to_string());
        p.rows.push(rec[1].parse().map_err(|_| bad("row index"))?);
        for m in 0..n_models {
            p.scores[m].push(rec[2 + 2 * m].parse().map_err(|_| bad("score"))?);
            p.calls[m].push(&rec[3 + 2 * m] == "1");
        }
        if let Some(te) = p.te_estimate.as_mut() {
            te.push(rec[header.len() - 1].parse().map_err(|_| bad("effect estimate"))?);
        }
    }
    Ok(p)
}

/// Compact description of a fitted model for `meta_models.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaSummary {
    pub kind: MetaKind,
    pub threshold: f64,
    pub train_seed: u64,
    pub label_frequency: Option<f64>,
    pub class_prior: Option<f64>,
    pub warnings: Vec<String>,
    pub parameters: serde_json::Value,
}

pub fn summarize(model: &MetaModel) -> MetaSummary {
    let parameters = match &model.params {
        MetaParams::Lr(m) => serde_json::json!({ "intercept": m.intercept, "coef": m.coef, "l2": m.l2 }),
        MetaParams::Rf(f) => serde_json::json!({
            "n_trees": f.trees.len(),
            "total_nodes": f.trees.iter().map(|t| t.n_nodes()).sum::<usize>(),
        }),
        MetaParams::Nn(n) => serde_json::json!({ "hidden": n.b1.len(), "epochs": n.epochs }),
        MetaParams::AdapterPu(a) => serde_json::json!({
            "base_intercept": a.base.intercept,
            "base_coef": a.base.coef,
            "estimation_fold": a.calibration.estimation_fold,
        }),
        MetaParams::Upu(u) => serde_json::json!({ "intercept": u.intercept, "coef": u.coef, "loss": u.loss }),
        MetaParams::Ensemble { members } => {
            serde_json::json!({ "members": members.iter().map(|m| m.kind.name()).collect::<Vec<_>>() })
        }
        MetaParams::Random { rate } => serde_json::json!({ "rate": rate }),
    };
    MetaSummary {
        kind: model.kind,
        threshold: model.threshold,
        train_seed: model.train_seed,
        label_frequency: model.label_frequency(),
        class_prior: model.prior(),
        warnings: model.warnings.clone(),
        parameters,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::KnownCauseLabels;
    use crate::learners::LearnerOutput;
    use crate::stack::{assemble, split_variables};

    fn separable_l1(v: usize) -> Level1Dataset {
        let labels: Vec<bool> = (0..v).map(|i| i % 5 == 0).collect();
        let out = |learner: &str, noise: f64| LearnerOutput {
            dataset_id: "d".into(),
            learner_id: learner.into(),
            variable_names: (0..v).map(|i| format!("v{i}")).collect(),
            phi: (0..v)
                .map(|i| labels[i] as u8 as f64 + noise * ((i * 37 % 11) as f64 / 11.0 - 0.5))
                .collect(),
            p_values: None,
            causal_call: labels.clone(),
            n_bootstrap: 0,
            flags: vec![],
        };
        let outs = vec![out("a", 0.0), out("b", 0.4)];
        let l1 = assemble(&outs, &KnownCauseLabels::new(labels.clone(), Some(1.0)).unwrap(), false).unwrap();
        split_variables(&l1, 0.67, 2).unwrap()
    }

    #[test]
    fn every_kind_fits_separable_training_data() {
        let l1 = separable_l1(200);
        let cfg = MetaConfig::default();
        let models = fit_all(&l1, &cfg).unwrap();
        let x = l1.features(cfg.features).unwrap().select_rows(&l1.split().unwrap().train);
        let y = l1.train_labels().unwrap();
        for m in models.iter().filter(|m| m.kind != MetaKind::Random) {
            let pred = m.predict(&x);
            assert_eq!(pred, y, "{}", m.kind);
            assert!(m.scores(&x).iter().all(|s| (0.0..=1.0).contains(s)));
        }
    }

    #[test]
    fn random_rate_matches_positive_share() {
        let model = MetaModel {
            kind: MetaKind::Random,
            params: MetaParams::Random { rate: 0.2 },
            threshold: 0.5,
            train_seed: 9,
            warnings: vec![],
        };
        let x = DMatrix::zeros(10_000, 1);
        let hits = model.predict(&x).iter().filter(|&&c| c).count() as f64;
        let sd = (10_000.0f64 * 0.2 * 0.8).sqrt();
        assert!((hits - 2000.0).abs() <= 3.0 * sd, "{hits}");
    }

    #[test]
    fn deterministic_predictions() {
        let l1 = separable_l1(150);
        let cfg = MetaConfig::default();
        let a = predict_test(&fit_all(&l1, &cfg).unwrap(), &l1, cfg.features).unwrap();
        let b = predict_test(&fit_all(&l1, &cfg).unwrap(), &l1, cfg.features).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn vote_rules() {
        assert_eq!(ensemble_vote(&[vec![true], vec![true], vec![false]]).unwrap(), vec![true]);
        assert_eq!(ensemble_vote(&[vec![true], vec![false]]).unwrap(), vec![false]);
        let same = vec![true, false, true];
        assert_eq!(ensemble_vote(&[same.clone(), same.clone(), same.clone()]).unwrap(), same);
        assert!(ensemble_vote(&[vec![true], vec![true, false]]).is_err());
    }

    #[test]
    fn predictions_round_trip() {
        let l1 = separable_l1(100);
        let cfg = MetaConfig {
            kinds: vec![MetaKind::Lr, MetaKind::Random],
            ..Default::default()
        };
        let mut p = predict_test(&fit_all(&l1, &cfg).unwrap(), &l1, cfg.features).unwrap();
        p.te_estimate = Some(vec![0.125; p.rows.len()]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("predictions.csv");
        write_predictions(&p, &path, &[("config_hash", "x".into())]).unwrap();
        assert_eq!(read_predictions(&path).unwrap(), p);
    }

    #[test]
    fn kind_names_parse() {
        for k in MetaKind::ALL {
            assert_eq!(k.name().parse::<MetaKind>().unwrap(), k);
            let json = serde_json::to_string(&k).unwrap();
            assert_eq!(json, format!("\"{}\"", k.name()));
        }
        assert!("SVM".parse::<MetaKind>().is_err());
    }
}
