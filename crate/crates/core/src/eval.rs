//! Classification metrics, learner diversity and effect-estimation error.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::average_ranks;

/// Pairwise diversity reported by the original study, kept as reference
/// metadata next to our own numbers.
pub const REFERENCE_Q_AV_REAL: f64 = -0.013;
pub const REFERENCE_Q_AV_SIMULATED: f64 = -0.051;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn from_calls(pred: &[bool], truth: &[bool]) -> Result<Self> {
        check_len(pred.len(), truth.len())?;
        let mut c = ConfusionCounts::default();
        for (&p, &t) in pred.iter().zip(truth) {
            match (p, t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::data(format!("vectors of length {a} and {b} are not aligned")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// No row was predicted positive, so precision was set to 0.
    pub no_predicted_positives: bool,
}

pub fn precision_recall_f1(pred: &[bool], truth: &[bool]) -> Result<Prf> {
    let c = ConfusionCounts::from_calls(pred, truth)?;
    if c.tp + c.fn_ == 0 {
        return Err(Error::data("truth has no positives"));
    }
    let no_pos = c.tp + c.fp == 0;
    let precision = if no_pos { 0.0 } else { c.tp as f64 / (c.tp + c.fp) as f64 };
    let recall = c.tp as f64 / (c.tp + c.fn_) as f64;
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(Prf {
        precision,
        recall,
        f1,
        no_predicted_positives: no_pos,
    })
}

/// Mann-Whitney AUC with average ranks for ties.
pub fn roc_auc(scores: &[f64], truth: &[bool]) -> Result<f64> {
    check_len(scores.len(), truth.len())?;
    let n_pos = truth.iter().filter(|&&t| t).count();
    let n_neg = truth.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::data("AUC needs both classes"));
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(truth).filter(|(_, &t)| t).map(|(r, _)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QValue {
    pub q: f64,
    /// `ad + bc = 0`; `q` is reported as 0.
    pub degenerate: bool,
}

/// Yule's Q on the 2×2 table of two call vectors:
/// `(ad − bc) / (ad + bc)`.
pub fn q_statistic(call_i: &[bool], call_j: &[bool]) -> Result<QValue> {
    check_len(call_i.len(), call_j.len())?;
    let (mut a, mut b, mut c, mut d) = (0.0, 0.0, 0.0, 0.0);
    for (&x, &y) in call_i.iter().zip(call_j) {
        match (x, y) {
            (true, true) => a += 1.0,
            (true, false) => b += 1.0,
            (false, true) => c += 1.0,
            (false, false) => d += 1.0,
        }
    }
    let den = a * d + b * c;
    if den == 0.0 {
        return Ok(QValue { q: 0.0, degenerate: true });
    }
    Ok(QValue {
        q: (a * d - b * c) / den,
        degenerate: false,
    })
}

/// Kuncheva's variant: Q on the per-row correctness of each learner.
pub fn q_statistic_oracle(call_i: &[bool], call_j: &[bool], truth: &[bool]) -> Result<QValue> {
    check_len(call_i.len(), truth.len())?;
    check_len(call_j.len(), truth.len())?;
    let ci: Vec<bool> = call_i.iter().zip(truth).map(|(a, b)| a == b).collect();
    let cj: Vec<bool> = call_j.iter().zip(truth).map(|(a, b)| a == b).collect();
    q_statistic(&ci, &cj)
}

fn average_over_pairs(n: usize, mut q: impl FnMut(usize, usize) -> Result<QValue>) -> Result<(f64, usize)> {
    if n < 2 {
        return Err(Error::config(format!("diversity needs at least 2 learners, got {n}")));
    }
    let mut sum = 0.0;
    let mut degenerate = 0;
    for i in 0..n - 1 {
        for j in i + 1..n {
            let v = q(i, j)?;
            sum += v.q;
            degenerate += v.degenerate as usize;
        }
    }
    Ok((2.0 * sum / (n * (n - 1)) as f64, degenerate))
}

/// `Q_av = 2 / (L(L−1)) Σ_{i<j} Q_{i,j}`.
pub fn q_average(calls: &[Vec<bool>]) -> Result<f64> {
    Ok(average_over_pairs(calls.len(), |i, j| q_statistic(&calls[i], &calls[j]))?.0)
}

pub fn q_average_oracle(calls: &[Vec<bool>], truth: &[bool]) -> Result<f64> {
    Ok(average_over_pairs(calls.len(), |i, j| q_statistic_oracle(&calls[i], &calls[j], truth))?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pehe {
    /// Mean squared error; the comparison metric.
    pub sq: f64,
    /// Mean signed error, as literally written in the original definition.
    pub raw: f64,
}

pub fn pehe(tau_hat: &[f64], tau_true: &[f64]) -> Result<Pehe> {
    check_len(tau_hat.len(), tau_true.len())?;
    if tau_hat.is_empty() {
        return Err(Error::data("PEHE needs at least one effect"));
    }
    let n = tau_hat.len() as f64;
    let (mut sq, mut raw) = (0.0, 0.0);
    for (h, t) in tau_hat.iter().zip(tau_true) {
        let e = t - h;
        sq += e * e;
        raw += e;
    }
    Ok(Pehe { sq: sq / n, raw: raw / n })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelRole {
    Learner,
    Meta,
    Baseline,
}

/// Calls and ranking scores of one model on the test rows.
#[derive(Debug, Clone)]
pub struct ModelCalls {
    pub name: String,
    pub role: ModelRole,
    pub calls: Vec<bool>,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeheRow {
    pub model: String,
    pub pehe_sq: f64,
    pub pehe_raw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceValues {
    pub q_av_real: f64,
    pub q_av_simulated: f64,
}

/// Everything written to `metrics.json`. Arrays under `models` are aligned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub models: Vec<String>,
    pub roles: Vec<ModelRole>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub auc: Vec<Option<f64>>,
    pub flags: Vec<Vec<String>>,
    pub n_test: usize,
    pub n_test_positive: usize,
    pub q_av: f64,
    pub q_av_oracle: f64,
    pub q_degenerate_pairs: usize,
    /// Squared PEHE of the stacked effect regressor (simulation mode).
    pub pehe_sq: Option<f64>,
    pub pehe_raw: Option<f64>,
    pub pehe_by_model: Vec<PeheRow>,
    pub proportion: Option<f64>,
    pub excluded: Vec<String>,
    pub seeds: serde_json::Value,
    pub config_hash: String,
    pub reference: ReferenceValues,
}

impl MetricsReport {
    pub fn f1_of(&self, model: &str) -> Option<f64> {
        self.models.iter().position(|m| m == model).map(|i| self.f1[i])
    }

    /// Highest F1 among rows with the given role.
    pub fn best_f1(&self, role: ModelRole) -> Option<(String, f64)> {
        self.models
            .iter()
            .zip(&self.roles)
            .zip(&self.f1)
            .filter(|((_, r), _)| **r == role)
            .map(|((m, _), f)| (m.clone(), *f))
            .fold(None, |best: Option<(String, f64)>, cur| match best {
                Some(b) if b.1 >= cur.1 => Some(b),
                _ => Some(cur),
            })
    }
}

/// One metrics row per model, sorted by F1 (descending, stable), plus the
/// learners' pairwise diversity on the test rows.
pub fn compare_learners_vs_meta(learners: &[ModelCalls], metas: &[ModelCalls], truth: &[bool]) -> Result<MetricsReport> {
    let n = truth.len();
    for m in learners.iter().chain(metas) {
        if m.calls.len() != n || m.scores.len() != n {
            return Err(Error::data(format!("model {} is not aligned with the test rows", m.name)));
        }
    }
    let both_classes = truth.iter().any(|&t| t) && truth.iter().any(|&t| !t);
    let mut rows = Vec::new();
    for m in learners.iter().chain(metas) {
        let prf = precision_recall_f1(&m.calls, truth)?;
        let auc = if both_classes { Some(roc_auc(&m.scores, truth)?) } else { None };
        let mut flags = Vec::new();
        if prf.no_predicted_positives {
            flags.push("no-predicted-positives".to_string());
        }
        rows.push((m.name.clone(), m.role, prf, auc, flags));
    }
    rows.sort_by(|a, b| b.2.f1.total_cmp(&a.2.f1));
    let learner_calls: Vec<Vec<bool>> = learners.iter().map(|l| l.calls.clone()).collect();
    let (q_av, degenerate) = average_over_pairs(learner_calls.len(), |i, j| q_statistic(&learner_calls[i], &learner_calls[j]))?;
    let q_av_oracle = q_average_oracle(&learner_calls, truth)?;
    Ok(MetricsReport {
        models: rows.iter().map(|r| r.0.clone()).collect(),
        roles: rows.iter().map(|r| r.1).collect(),
        precision: rows.iter().map(|r| r.2.precision).collect(),
        recall: rows.iter().map(|r| r.2.recall).collect(),
        f1: rows.iter().map(|r| r.2.f1).collect(),
        auc: rows.iter().map(|r| r.3).collect(),
        flags: rows.into_iter().map(|r| r.4).collect(),
        n_test: n,
        n_test_positive: truth.iter().filter(|&&t| t).count(),
        q_av,
        q_av_oracle,
        q_degenerate_pairs: degenerate,
        pehe_sq: None,
        pehe_raw: None,
        pehe_by_model: Vec::new(),
        proportion: None,
        excluded: Vec::new(),
        seeds: serde_json::Value::Null,
        config_hash: String::new(),
        reference: ReferenceValues {
            q_av_real: REFERENCE_Q_AV_REAL,
            q_av_simulated: REFERENCE_Q_AV_SIMULATED,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util;
    use rand::Rng as _;

    fn bools(v: &[u8]) -> Vec<bool> {
        v.iter().map(|&x| x == 1).collect()
    }

    #[test]
    fn prf_examples() {
        let p = precision_recall_f1(&bools(&[1, 1, 0, 0]), &bools(&[1, 0, 1, 0])).unwrap();
        assert_eq!((p.precision, p.recall, p.f1), (0.5, 0.5, 0.5));
        let t = bools(&[1, 0, 1, 1]);
        let p = precision_recall_f1(&t, &t).unwrap();
        assert_eq!((p.precision, p.recall, p.f1), (1.0, 1.0, 1.0));
        let p = precision_recall_f1(&bools(&[0, 0, 0, 0]), &t).unwrap();
        assert!(p.no_predicted_positives);
        assert_eq!((p.precision, p.recall, p.f1), (0.0, 0.0, 0.0));
        assert!(precision_recall_f1(&t, &t[..3]).is_err());
    }

    #[test]
    fn auc_examples() {
        let truth = bools(&[0, 0, 1, 1]);
        assert_eq!(roc_auc(&[0.1, 0.2, 0.3, 0.4], &truth).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.5; 4], &truth).unwrap(), 0.5);
        assert!(roc_auc(&[0.5; 4], &bools(&[1, 1, 1, 1])).is_err());
    }

    #[test]
    fn auc_matches_pair_count() {
        let mut rng = util::rng(8);
        for _ in 0..20 {
            let scores: Vec<f64> = (0..20).map(|_| (rng.random_range(0..6) as f64) / 5.0).collect();
            let mut truth: Vec<bool> = (0..20).map(|_| rng.random::<bool>()).collect();
            truth[0] = true;
            truth[1] = false;
            let (mut good, mut pairs) = (0.0, 0.0);
            for i in 0..20 {
                for j in 0..20 {
                    if truth[i] && !truth[j] {
                        pairs += 1.0;
                        good += if scores[i] > scores[j] {
                            1.0
                        } else if scores[i] == scores[j] {
                            0.5
                        } else {
                            0.0
                        };
                    }
                }
            }
            assert_eq!(roc_auc(&scores, &truth).unwrap(), good / pairs);
        }
    }

    #[test]
    fn q_examples() {
        let a = bools(&[1, 1, 1, 0, 0, 0]);
        let b = bools(&[1, 1, 0, 1, 0, 0]);
        assert!((q_statistic(&a, &b).unwrap().q - 0.6).abs() < 1e-15);
        let x = bools(&[1, 0, 1, 0]);
        assert_eq!(q_statistic(&x, &x).unwrap().q, 1.0);
        let y: Vec<bool> = x.iter().map(|v| !v).collect();
        assert_eq!(q_statistic(&x, &y).unwrap().q, -1.0);
        let d = q_statistic(&bools(&[1, 1]), &bools(&[1, 1])).unwrap();
        assert!(d.degenerate && d.q == 0.0);
        assert!(q_statistic(&x, &x[..2]).is_err());
    }

    #[test]
    fn q_average_pairs() {
        let a = bools(&[1, 1, 1, 0, 0, 0]);
        let b = bools(&[1, 1, 0, 1, 0, 0]);
        assert_eq!(q_average(&[a.clone(), b.clone()]).unwrap(), q_statistic(&a, &b).unwrap().q);
        assert_eq!(q_average(&[a.clone(), a.clone(), a.clone()]).unwrap(), 1.0);
        assert!(q_average(&[a]).is_err());
    }

    #[test]
    fn pehe_examples() {
        assert_eq!(pehe(&[0.1, 0.2], &[0.1, 0.2]).unwrap(), Pehe { sq: 0.0, raw: 0.0 });
        let p = pehe(&[1.0, -1.0], &[0.0, 0.0]).unwrap();
        assert_eq!((p.sq, p.raw), (1.0, 0.0));
    }

    #[test]
    fn report_sorts_by_f1() {
        let truth = bools(&[1, 0, 1, 0, 0]);
        let anti: Vec<bool> = truth.iter().map(|t| !t).collect();
        let mk = |name: &str, role, calls: &Vec<bool>| ModelCalls {
            name: name.into(),
            role,
            calls: calls.clone(),
            scores: calls.iter().map(|&c| c as u8 as f64).collect(),
        };
        let learners = vec![mk("d/a", ModelRole::Learner, &anti), mk("d/b", ModelRole::Learner, &anti)];
        let metas = vec![mk("LR", ModelRole::Meta, &truth)];
        let r = compare_learners_vs_meta(&learners, &metas, &truth).unwrap();
        assert_eq!(r.models[0], "LR");
        assert_eq!(r.f1[0], 1.0);
        assert_eq!(r.best_f1(ModelRole::Learner).unwrap().1, 0.0);
    }
}
