//! Declarative run configuration (a single JSON document).

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::DEFAULT_TRAIN_FRACTION;
use crate::error::{Error, Result};
use crate::learners::cate::CateConfig;
use crate::learners::deconfounder::DeconfounderConfig;
use crate::learners::ppca::PpcaConfig;
use crate::learners::BinarizeStrategy;
use crate::meta::MetaConfig;
use crate::sim::SimConfig;

/// Environment variable that overrides `output_dir` (but not `--out`).
pub const OUTPUT_DIR_ENV: &str = "CAUSAL_STACK_OUT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Simulate,
    Real,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSpec {
    /// Generator settings; `seed` is replaced by a per-replicate seed.
    pub sim: SimConfig,
    /// Independent simulated datasets (replicates).
    pub n_datasets: usize,
    /// Splits each simulated cohort into this many disjoint subsets, each
    /// treated as its own level-0 dataset.
    pub n_subsets: usize,
}

impl Default for SimulationSpec {
    fn default() -> Self {
        SimulationSpec {
            sim: SimConfig::default(),
            n_datasets: 10,
            n_subsets: 1,
        }
    }
}

/// Keeps samples whose metadata `column` takes one of `values`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RowFilter {
    /// CSV with a `sample_id` column.
    pub metadata: PathBuf,
    pub column: String,
    pub values: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub path: PathBuf,
    #[serde(default = "default_outcome")]
    pub outcome_column: String,
    /// Defaults to the file stem.
    #[serde(default)]
    pub id: Option<String>,
    #[serde(default)]
    pub filter: Option<RowFilter>,
}

fn default_outcome() -> String {
    "y".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LearnerSpec {
    Deconfounder {
        #[serde(default)]
        id: Option<String>,
        #[serde(default)]
        config: DeconfounderConfig,
        /// One learner per factor count, named `<id>_k<k>`; empty uses `config.ppca.k`.
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        k_grid: Vec<usize>,
    },
    Cate {
        #[serde(default)]
        id: Option<String>,
        #[serde(default)]
        config: CateConfig,
        /// Factor model for the proxies when no deconfounder is configured.
        #[serde(default)]
        ppca: PpcaConfig,
    },
    Marginal {
        #[serde(default)]
        id: Option<String>,
        #[serde(default = "BinarizeStrategy::top_fraction")]
        binarize: BinarizeStrategy,
    },
}

impl LearnerSpec {
    pub fn id(&self) -> String {
        match self {
            LearnerSpec::Deconfounder { id, .. } => id.clone().unwrap_or_else(|| "deconfounder".into()),
            LearnerSpec::Cate { id, .. } => id.clone().unwrap_or_else(|| "cate".into()),
            LearnerSpec::Marginal { id, .. } => id.clone().unwrap_or_else(|| "marginal".into()),
        }
    }
}

/// Learner list with every `k_grid` expanded into single-k deconfounders.
pub fn expand_learners(specs: &[LearnerSpec]) -> Vec<LearnerSpec> {
    let mut out = Vec::new();
    for spec in specs {
        match spec {
            LearnerSpec::Deconfounder { config, k_grid, .. } if !k_grid.is_empty() => {
                let base = spec.id();
                for &k in k_grid {
                    let mut config = config.clone();
                    config.ppca.k = k;
                    out.push(LearnerSpec::Deconfounder {
                        id: Some(format!("{base}_k{k}")),
                        config,
                        k_grid: Vec::new(),
                    });
                }
            }
            other => out.push(other.clone()),
        }
    }
    out
}

pub fn default_learners() -> Vec<LearnerSpec> {
    vec![
        LearnerSpec::Deconfounder {
            id: None,
            config: DeconfounderConfig::default(),
            k_grid: Vec::new(),
        },
        LearnerSpec::Cate {
            id: None,
            config: CateConfig::default(),
            ppca: PpcaConfig::default(),
        },
        LearnerSpec::Marginal {
            id: None,
            binarize: BinarizeStrategy::top_fraction(),
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Level1Config {
    /// Replace effects of variables a learner did not call with 0.
    pub zero_noncausal: bool,
    pub train_fraction: f64,
}

impl Default for Level1Config {
    fn default() -> Self {
        Level1Config {
            zero_noncausal: false,
            train_fraction: DEFAULT_TRAIN_FRACTION,
        }
    }
}

pub fn default_masking() -> Vec<f64> {
    (1..=10).map(|i| i as f64 / 10.0).collect()
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub simulation: SimulationSpec,
    #[serde(default)]
    pub datasets: Vec<DatasetSpec>,
    /// Real mode: file listing known causes, one variable name per line
    /// (a `variable` header line and `#` comments are allowed).
    #[serde(default)]
    pub known_causes: Option<PathBuf>,
    #[serde(default = "default_learners")]
    pub learners: Vec<LearnerSpec>,
    #[serde(default)]
    pub meta: MetaConfig,
    #[serde(default = "default_masking")]
    pub masking: Vec<f64>,
    #[serde(default)]
    pub level1: Level1Config,
}

impl RunConfig {
    pub fn simulated(sim: SimConfig, n_datasets: usize) -> Self {
        RunConfig {
            mode: Mode::Simulate,
            master_seed: 0,
            output_dir: default_output_dir(),
            simulation: SimulationSpec {
                sim,
                n_datasets,
                n_subsets: 1,
            },
            datasets: Vec::new(),
            known_causes: None,
            learners: default_learners(),
            meta: MetaConfig::default(),
            masking: default_masking(),
            level1: Level1Config::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative dataset paths resolve against its folder.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        if let Some(base) = path.parent() {
            let fix = |p: &mut PathBuf| {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            };
            for d in &mut cfg.datasets {
                fix(&mut d.path);
                if let Some(f) = &mut d.filter {
                    fix(&mut f.metadata);
                }
            }
            if let Some(k) = &mut cfg.known_causes {
                fix(k);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            Mode::Simulate => {
                self.simulation.sim.validate()?;
                if self.simulation.n_datasets == 0 || self.simulation.n_subsets == 0 {
                    return Err(Error::config("simulation needs at least one dataset and one subset"));
                }
            }
            Mode::Real => {
                if self.datasets.is_empty() {
                    return Err(Error::config("real mode needs at least one dataset"));
                }
                if self.known_causes.is_none() {
                    return Err(Error::config("real mode needs a known_causes file"));
                }
            }
        }
        let learners = expand_learners(&self.learners);
        if learners.len() < 2 {
            return Err(Error::config("at least 2 learners are required"));
        }
        let mut ids = HashSet::new();
        for l in &learners {
            if let LearnerSpec::Deconfounder { config, .. } = l {
                if config.ppca.k == 0 {
                    return Err(Error::config("deconfounder needs k >= 1"));
                }
            }
            let id = l.id();
            if id.is_empty() || id.contains(['/', ' ']) {
                return Err(Error::config(format!("learner id `{id}` must be non-empty without '/' or spaces")));
            }
            if !ids.insert(id.clone()) {
                return Err(Error::config(format!("duplicate learner id `{id}`")));
            }
        }
        self.meta.validate()?;
        if self.masking.is_empty() || self.masking.iter().any(|p| !(*p > 0.0 && *p <= 1.0)) {
            return Err(Error::config("masking proportions must lie in (0, 1]"));
        }
        let lf = self.level1.train_fraction;
        if !(lf > 0.0 && lf < 1.0) {
            return Err(Error::config(format!("level-1 train fraction {lf} outside (0, 1)")));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON (sorted keys) without `output_dir`.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = value.as_object_mut() {
            obj.remove("output_dir");
        }
        let canonical = serde_json::to_string(&value).expect("value serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = RunConfig::from_json(r#"{"mode": "simulate"}"#).unwrap();
        assert_eq!(cfg.learners.len(), 3);
        assert_eq!(cfg.masking.len(), 10);
        assert_eq!(cfg.simulation.n_datasets, 10);
        assert_eq!(cfg.meta.kinds.len(), 7);
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = RunConfig::simulated(SimConfig::default(), 2);
        let mut b = a.clone();
        b.output_dir = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.master_seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn round_trips_through_json() {
        let cfg = RunConfig::simulated(SimConfig::default(), 3);
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(RunConfig::from_json(r#"{"mode": "real"}"#).is_err());
        assert!(RunConfig::from_json(r#"{"mode": "simulate", "masking": [0.0]}"#).is_err());
        assert!(RunConfig::from_json(r#"{"mode": "simulate", "learners": [{"kind": "marginal"}]}"#).is_err());
        assert!(RunConfig::from_json(r#"{"mode": "simulate", "bogus": 1}"#).is_err());
        let dup = r#"{"mode": "simulate", "learners": [{"kind": "marginal"}, {"kind": "marginal"}]}"#;
        assert!(RunConfig::from_json(dup).is_err());
        let ok = r#"{"mode": "simulate", "learners": [{"kind": "marginal"}, {"kind": "marginal", "id": "m2"}]}"#;
        assert!(RunConfig::from_json(ok).is_ok());
    }

    #[test]
    fn k_grid_expands() {
        let cfg = RunConfig::from_json(r#"{"mode": "simulate", "learners": [{"kind": "deconfounder", "k_grid": [5, 10]}]}"#)
            .unwrap();
        let ids: Vec<String> = expand_learners(&cfg.learners).iter().map(|l| l.id()).collect();
        assert_eq!(ids, ["deconfounder_k5", "deconfounder_k10"]);
        assert!(RunConfig::from_json(r#"{"mode": "simulate", "learners": [{"kind": "deconfounder", "k_grid": [5]}]}"#).is_err());
    }
}
