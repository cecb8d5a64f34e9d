//! Subsampling bootstrap of per-variable effect estimates and the two-tailed
//! zero test on the resulting draws.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Level0Dataset;
use crate::error::{Error, Result};
use crate::util::{self, derive_seed};

/// Smallest number of replicates for which p-values are reported.
pub const MIN_REPLICATES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapSpec {
    pub replicates: usize,
    pub seed: u64,
}

impl Default for BootstrapSpec {
    fn default() -> Self {
        BootstrapSpec { replicates: 50, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct BootstrapResult {
    /// `B × V` matrix of per-replicate estimates.
    pub samples: DMatrix<f64>,
    pub mean: Vec<f64>,
    pub p_value: Vec<f64>,
    pub subsample_size: usize,
}

impl BootstrapResult {
    pub fn replicates(&self) -> usize {
        self.samples.nrows()
    }
}

/// `J' = ⌊0.9 J⌋`, in integer arithmetic.
pub fn subsample_size(n: usize) -> usize {
    n * 9 / 10
}

/// Draws `spec.replicates` subsamples of size `⌊0.9 J⌋` without replacement
/// and calls `learner(rows, replicate_seed)` on each. Replicates run in
/// parallel; results are gathered by replicate index, so the output does not
/// depend on scheduling.
pub fn bootstrap_rows<F>(n_samples: usize, spec: &BootstrapSpec, learner: F) -> Result<BootstrapResult>
where
    F: Fn(&[usize], u64) -> Result<Vec<f64>> + Sync,
{
    if spec.replicates < MIN_REPLICATES {
        return Err(Error::config(format!(
            "bootstrap needs at least {MIN_REPLICATES} replicates, got {}",
            spec.replicates
        )));
    }
    let size = subsample_size(n_samples);
    if size < 2 {
        return Err(Error::data(format!("{n_samples} samples are too few to subsample")));
    }
    let draws: Vec<Vec<f64>> = (0..spec.replicates)
        .into_par_iter()
        .map(|b| {
            let seed = derive_seed(spec.seed, b as u64);
            let mut rng = util::rng(seed);
            let mut rows = rand::seq::index::sample(&mut rng, n_samples, size).into_vec();
            rows.sort_unstable();
            learner(&rows, derive_seed(seed, 1))
        })
        .collect::<Result<_>>()?;
    let v = draws[0].len();
    if draws.iter().any(|d| d.len() != v) {
        return Err(Error::numerical("learner returned estimates of varying length"));
    }
    let samples = DMatrix::from_fn(spec.replicates, v, |b, j| draws[b][j]);
    summarize(samples, size)
}

/// Dataset-level wrapper: the learner receives the subsampled dataset.
pub fn bootstrap_effects<F>(ds: &Level0Dataset, learner: F, spec: &BootstrapSpec) -> Result<BootstrapResult>
where
    F: Fn(&Level0Dataset, u64) -> Result<Vec<f64>> + Sync,
{
    bootstrap_rows(ds.n_samples(), spec, |rows, seed| {
        let sub = ds.select_samples(rows)?;
        learner(&sub, seed)
    })
}

fn summarize(samples: DMatrix<f64>, subsample_size: usize) -> Result<BootstrapResult> {
    let b = samples.nrows() as f64;
    let mut mean = Vec::with_capacity(samples.ncols());
    let mut p_value = Vec::with_capacity(samples.ncols());
    for col in samples.column_iter() {
        let draws: Vec<f64> = col.iter().copied().collect();
        mean.push(draws.iter().sum::<f64>() / b);
        p_value.push(two_tailed_zero_test(&draws)?);
    }
    Ok(BootstrapResult {
        samples,
        mean,
        p_value,
        subsample_size,
    })
}

/// Percentile sign test of `H₀: φ = 0` on bootstrap draws:
/// `p = min(1, 2 · min(#{φ_b ≤ 0}, #{φ_b ≥ 0}) / B)`.
pub fn two_tailed_zero_test(samples: &[f64]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::config("zero test needs at least one sample"));
    }
    if samples.len() < MIN_REPLICATES {
        return Err(Error::config(format!(
            "zero test needs at least {MIN_REPLICATES} samples, got {}",
            samples.len()
        )));
    }
    let n = samples.len() as f64;
    let le = samples.iter().filter(|&&s| s <= 0.0).count() as f64;
    let ge = samples.iter().filter(|&&s| s >= 0.0).count() as f64;
    Ok((2.0 * le.min(ge) / n).min(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn subsample_is_ninety_percent() {
        assert_eq!(subsample_size(100), 90);
        assert_eq!(subsample_size(1000), 900);
        assert_eq!(subsample_size(15), 13);
    }

    #[test]
    fn zero_test_extremes() {
        assert_eq!(two_tailed_zero_test(&[0.3; 50]).unwrap(), 0.0);
        let mut balanced = vec![-1.0; 25];
        balanced.extend(vec![1.0; 25]);
        assert_eq!(two_tailed_zero_test(&balanced).unwrap(), 1.0);
        assert_eq!(two_tailed_zero_test(&[0.0; 30]).unwrap(), 1.0);
        assert!(two_tailed_zero_test(&[]).is_err());
        assert!(two_tailed_zero_test(&[1.0; 10]).is_err());
    }

    #[test]
    fn zero_test_power_against_shifted_normal() {
        let dist = Normal::new(0.5, 0.1).unwrap();
        let mut rng = util::rng(17);
        let rejected = (0..1000)
            .filter(|_| {
                let s: Vec<f64> = (0..50).map(|_| dist.sample(&mut rng)).collect();
                two_tailed_zero_test(&s).unwrap() <= 0.05
            })
            .count();
        assert!(rejected >= 990, "rejected {rejected}/1000");
    }

    #[test]
    fn constant_learner_gives_constant_draws() {
        let res = bootstrap_rows(100, &BootstrapSpec { replicates: 25, seed: 3 }, |rows, _| {
            assert_eq!(rows.len(), 90);
            Ok(vec![2.5, -1.0])
        })
        .unwrap();
        assert_eq!(res.mean, vec![2.5, -1.0]);
        assert!(res.samples.column(0).iter().all(|&s| s == 2.5));
        assert_eq!(res.p_value, vec![0.0, 0.0]);
        assert_eq!(res.subsample_size, 90);
    }

    #[test]
    fn rows_are_distinct_and_deterministic() {
        let spec = BootstrapSpec { replicates: 20, seed: 9 };
        let run = || {
            bootstrap_rows(50, &spec, |rows, seed| {
                let mut uniq = rows.to_vec();
                uniq.dedup();
                assert_eq!(uniq.len(), rows.len());
                Ok(vec![rows.iter().sum::<usize>() as f64, (seed % 1000) as f64])
            })
            .unwrap()
        };
        assert_eq!(run().samples, run().samples);
    }

    #[test]
    fn mean_is_exact_column_mean() {
        let res = bootstrap_rows(40, &BootstrapSpec { replicates: 30, seed: 1 }, |rows, seed| {
            let mut rng = util::rng(seed);
            Ok(vec![rows[0] as f64 + rng.random::<f64>(), rng.random::<f64>()])
        })
        .unwrap();
        for (j, m) in res.mean.iter().enumerate() {
            let direct = res.samples.column(j).iter().sum::<f64>() / 30.0;
            assert_eq!(*m, direct);
        }
        assert!(bootstrap_rows(40, &BootstrapSpec { replicates: 10, seed: 1 }, |_, _| Ok(vec![0.0])).is_err());
    }
}
