//! Confounded GWAS simulator with known causal SNPs.
//!
//! Individuals belong to latent population groups. The groups shift allele
//! frequencies (so SNPs correlate with group) and also shift the trait
//! intercept (so the trait correlates with group): a textbook population
//! stratification confounder. The trait is logistic in standardized dosages of
//! the causal SNPs.

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Level0Dataset;
use crate::error::{Error, Result};
use crate::util::{self, sigmoid};

/// Target trait prevalence the intercept is tuned to.
pub const TARGET_PREVALENCE: f64 = 0.36;
/// Accepted range of the realized prevalence before the trait is redrawn.
pub const PREVALENCE_BOUNDS: (f64, f64) = (0.15, 0.85);
const MAX_PREVALENCE_ATTEMPTS: usize = 100;
/// Standard deviation of the per-group allele-frequency shift on the logit
/// scale, per unit of `confounder_strength`.
pub const ALLELE_SHIFT_SD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n_individuals: usize,
    pub n_snps: usize,
    pub causal_fraction: f64,
    pub n_groups: usize,
    pub effect_sd: f64,
    pub confounder_strength: f64,
    pub maf_range: (f64, f64),
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_individuals: 5000,
            n_snps: 10000,
            causal_fraction: 0.10,
            n_groups: 3,
            effect_sd: 0.5,
            confounder_strength: 1.0,
            maf_range: (0.05, 0.45),
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_individuals < 4 || self.n_snps < 1 {
            return Err(Error::config("simulation needs at least 4 individuals and 1 SNP"));
        }
        if !(self.causal_fraction > 0.0 && self.causal_fraction < 1.0) {
            return Err(Error::config(format!(
                "causal_fraction {} outside (0, 1)",
                self.causal_fraction
            )));
        }
        if self.n_groups < 2 {
            return Err(Error::config("n_groups must be at least 2"));
        }
        if !(self.effect_sd >= 0.0 && self.effect_sd.is_finite()) {
            return Err(Error::config("effect_sd must be a non-negative finite number"));
        }
        if !(self.confounder_strength >= 0.0 && self.confounder_strength.is_finite()) {
            return Err(Error::config("confounder_strength must be non-negative"));
        }
        let (lo, hi) = self.maf_range;
        if !(lo > 0.0 && lo <= hi && hi <= 0.5) {
            return Err(Error::config(format!("maf_range ({lo}, {hi}) must lie within (0, 0.5]")));
        }
        Ok(())
    }

    pub fn n_causal(&self) -> usize {
        (self.causal_fraction * self.n_snps as f64).round() as usize
    }
}

/// Ground truth behind a simulated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedTruth {
    pub causal_mask: Vec<bool>,
    /// Effect per standard deviation of dosage; zero off the causal mask.
    pub beta: Vec<f64>,
    pub group_assignment: Vec<usize>,
    /// Additive logit shift of each group (`confounder_strength * c_g`).
    pub group_intercepts: Vec<f64>,
    /// Global intercept tuned for the target prevalence.
    pub intercept: f64,
    /// Average effect of one extra allele copy on the trait probability.
    pub tau_true: Vec<f64>,
    pub config: SimConfig,
}

/// Draws one dataset and its ground truth. Deterministic in `cfg.seed`.
pub fn simulate_dataset(cfg: &SimConfig) -> Result<(Level0Dataset, SimulatedTruth)> {
    cfg.validate()?;
    let (n, v) = (cfg.n_individuals, cfg.n_snps);
    let mut rng = util::rng(cfg.seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");

    let groups: Vec<usize> = (0..n).map(|_| rng.random_range(0..cfg.n_groups)).collect();

    let (lo, hi) = cfg.maf_range;
    let shift_sd = ALLELE_SHIFT_SD * cfg.confounder_strength;
    let mut x = DMatrix::<f64>::zeros(n, v);
    let mut group_freq = vec![0.0; cfg.n_groups];
    for snp in 0..v {
        let base: f64 = if hi > lo { rng.random_range(lo..hi) } else { lo };
        let base_logit = (base / (1.0 - base)).ln();
        for f in group_freq.iter_mut() {
            *f = sigmoid(base_logit + shift_sd * std_normal.sample(&mut rng));
        }
        let mut col = x.column_mut(snp);
        for (i, &g) in groups.iter().enumerate() {
            let p = group_freq[g];
            let dosage = (rng.random::<f64>() < p) as u8 + (rng.random::<f64>() < p) as u8;
            col[i] = dosage as f64;
        }
    }

    let n_causal = cfg.n_causal();
    let mut causal_mask = vec![false; v];
    for idx in rand::seq::index::sample(&mut rng, v, n_causal).iter() {
        causal_mask[idx] = true;
    }
    let effect = Normal::new(0.0, cfg.effect_sd).map_err(|e| Error::config(e.to_string()))?;
    let mut beta = vec![0.0; v];
    for (b, _) in beta.iter_mut().zip(&causal_mask).filter(|(_, &m)| m) {
        *b = effect.sample(&mut rng);
    }
    let group_intercepts: Vec<f64> = (0..cfg.n_groups)
        .map(|_| cfg.confounder_strength * std_normal.sample(&mut rng))
        .collect();

    let genetic = genetic_score(&x, &beta);
    let offsets: Vec<f64> = (0..n).map(|i| genetic[i] + group_intercepts[groups[i]]).collect();
    let intercept = tune_intercept(&offsets, TARGET_PREVALENCE);

    let probs: Vec<f64> = offsets.iter().map(|o| sigmoid(intercept + o)).collect();
    let mut y0 = vec![0.0; n];
    let mut accepted = false;
    for _ in 0..MAX_PREVALENCE_ATTEMPTS {
        for (y, &p) in y0.iter_mut().zip(&probs) {
            *y = (rng.random::<f64>() < p) as u8 as f64;
        }
        let prevalence = util::mean(&y0);
        if prevalence >= PREVALENCE_BOUNDS.0 && prevalence <= PREVALENCE_BOUNDS.1 {
            accepted = true;
            break;
        }
    }
    if !accepted {
        return Err(Error::data(format!(
            "trait prevalence stayed outside {PREVALENCE_BOUNDS:?} after {MAX_PREVALENCE_ATTEMPTS} draws"
        )));
    }

    let names = (0..v).map(|j| format!("snp{j}")).collect();
    let ids = (0..n).map(|i| format!("ind{i}")).collect();
    let ds = Level0Dataset::new(format!("sim{}", cfg.seed), x, y0, names, ids)?;
    let mut truth = SimulatedTruth {
        causal_mask,
        beta,
        group_assignment: groups,
        group_intercepts,
        intercept,
        tau_true: Vec::new(),
        config: cfg.clone(),
    };
    truth.tau_true = true_effects(&truth, &ds)?;
    Ok((ds, truth))
}

/// `Σ_v β_v (x_iv − x̄_v) / sd_v` per individual; monomorphic SNPs contribute 0.
fn genetic_score(x: &DMatrix<f64>, beta: &[f64]) -> Vec<f64> {
    let n = x.nrows();
    let mut score = vec![0.0; n];
    for (v, &b) in beta.iter().enumerate() {
        if b == 0.0 {
            continue;
        }
        let col = x.column(v);
        let (m, sd) = column_moments(col.as_slice());
        if sd == 0.0 {
            continue;
        }
        for (s, &xi) in score.iter_mut().zip(col.iter()) {
            *s += b * (xi - m) / sd;
        }
    }
    score
}

fn column_moments(col: &[f64]) -> (f64, f64) {
    let n = col.len() as f64;
    let m = col.iter().sum::<f64>() / n;
    let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Bisection for `b0` with `mean_i σ(b0 + offset_i) = target`.
fn tune_intercept(offsets: &[f64], target: f64) -> f64 {
    let prevalence = |b0: f64| offsets.iter().map(|o| sigmoid(b0 + o)).sum::<f64>() / offsets.len() as f64;
    let (mut lo, mut hi) = (-60.0, 60.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if prevalence(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// True average effect of setting each SNP one allele above its mean versus
/// at its mean, everything else held at observed values:
/// `τ_v = mean_i[σ(ℓ_i | x_iv := x̄_v + 1) − σ(ℓ_i | x_iv := x̄_v)]`.
pub fn true_effects(truth: &SimulatedTruth, ds: &Level0Dataset) -> Result<Vec<f64>> {
    let (n, v) = (ds.n_samples(), ds.n_variables());
    if truth.beta.len() != v || truth.group_assignment.len() != n {
        return Err(Error::data(format!(
            "truth covers {} SNPs / {} individuals but dataset has {v} / {n}",
            truth.beta.len(),
            truth.group_assignment.len()
        )));
    }
    if let Some(&g) = truth
        .group_assignment
        .iter()
        .find(|&&g| g >= truth.group_intercepts.len())
    {
        return Err(Error::data(format!("group {g} has no intercept")));
    }
    let x = ds.x();
    let genetic = genetic_score(x, &truth.beta);
    let logits: Vec<f64> = (0..n)
        .map(|i| truth.intercept + genetic[i] + truth.group_intercepts[truth.group_assignment[i]])
        .collect();
    let mut tau = vec![0.0; v];
    for (snp, t) in tau.iter_mut().enumerate() {
        let b = truth.beta[snp];
        if b == 0.0 {
            continue;
        }
        let col = x.column(snp);
        let (m, sd) = column_moments(col.as_slice());
        if sd == 0.0 {
            continue;
        }
        let step = b / sd;
        let mut acc = 0.0;
        for (i, &xi) in col.iter().enumerate() {
            // Logit with this SNP at its mean.
            let base = logits[i] - b * (xi - m) / sd;
            acc += sigmoid(base + step) - sigmoid(base);
        }
        *t = acc / n as f64;
    }
    Ok(tau)
}
