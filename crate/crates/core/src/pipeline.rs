//! End-to-end runs: simulate → learn → stack → meta → eval, with resumable
//! on-disk artifacts.
//!
//! ```text
//! <out>/run.json
//! <out>/rep_00/data.csv | data_s{k}.csv, truth.json
//! <out>/rep_00/learner_output_<dataset>_<learner>.csv, excluded.json
//! <out>/rep_00/p0.10/level1.csv, predictions.csv, meta_models.json, metrics.json
//! <out>/sweep.csv, sweep_summary.csv
//! ```
//!
//! Every artifact carries the config hash; a stage whose artifacts carry the
//! current hash is loaded instead of recomputed.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::config::{expand_learners, LearnerSpec, Mode, RunConfig, OUTPUT_DIR_ENV};
use crate::data::{self, load_level0_csv, mask_known_causes, write_level0_csv, Level0Dataset};
use crate::error::{Error, Result};
use crate::eval::{compare_learners_vs_meta, pehe, MetricsReport, ModelCalls, ModelRole, PeheRow};
use crate::learners::cate::{cate_learner, CateConfig};
use crate::learners::deconfounder::{fit_and_check, run_da_with_factor, DeconfounderConfig};
use crate::learners::marginal::run_marginal_learner;
use crate::learners::ppca::{fit_ppca, PpcaConfig, PpcaModel, PredictiveCheck};
use crate::learners::{read_learner_output, write_learner_output, LearnerOutput};
use crate::meta::te::{fit_te_regressor, TeMetaRegressor};
use crate::meta::{self, fit_all, predict_test, read_predictions, write_predictions, MetaKind, MetaSummary, Predictions};
use crate::sim::{simulate_dataset, true_effects, SimulatedTruth};
use crate::stack::{assemble, read_level1_csv, split_variables, write_level1_csv, FeatureTransform, Level1Dataset};
use crate::util::{derive_named, derive_seed};

pub const MANIFEST: &str = "run.json";
/// Model name of the effect meta-regressor in sweep tables.
pub const TE_MODEL: &str = "TE";

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Highest-precedence output directory.
    pub out: Option<PathBuf>,
    /// Clear a non-empty output directory that belongs to another config.
    pub force: bool,
    /// Progress lines on stderr.
    pub verbose: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config_hash: String,
    master_seed: u64,
    config: RunConfig,
}

/// An opened output directory bound to one configuration.
#[derive(Debug, Clone)]
pub struct Run {
    pub config: RunConfig,
    pub hash: String,
    pub out: PathBuf,
    verbose: bool,
}

/// `--out`, then `CAUSAL_STACK_OUT`, then the config's `output_dir`.
pub fn resolve_output_dir(cfg: &RunConfig, out: Option<&Path>) -> PathBuf {
    if let Some(o) = out {
        return o.to_path_buf();
    }
    match std::env::var_os(OUTPUT_DIR_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => cfg.output_dir.clone(),
    }
}

impl Run {
    pub fn open(config: RunConfig, opts: &RunOptions) -> Result<Run> {
        config.validate()?;
        let out = resolve_output_dir(&config, opts.out.as_deref());
        let hash = config.hash();
        let manifest_path = out.join(MANIFEST);
        let non_empty = out.is_dir() && std::fs::read_dir(&out)?.next().is_some();
        if non_empty {
            let existing = std::fs::read_to_string(&manifest_path)
                .ok()
                .and_then(|t| serde_json::from_str::<Manifest>(&t).ok())
                .map(|m| m.config_hash);
            if existing.as_deref() != Some(hash.as_str()) {
                if !opts.force {
                    return Err(Error::config(format!(
                        "output directory {} holds results of a different configuration; pass --force to overwrite",
                        out.display()
                    )));
                }
                std::fs::remove_dir_all(&out)?;
            }
        }
        std::fs::create_dir_all(&out)?;
        artifact::write_json(
            &manifest_path,
            &Manifest {
                config_hash: hash.clone(),
                master_seed: config.master_seed,
                config: config.clone(),
            },
        )?;
        Ok(Run {
            config,
            hash,
            out,
            verbose: opts.verbose,
        })
    }

    fn provenance(&self) -> Vec<(&'static str, String)> {
        vec![
            ("config_hash", self.hash.clone()),
            ("master_seed", self.config.master_seed.to_string()),
        ]
    }

    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("[causal-stack] {}", msg.as_ref());
        }
    }

    fn current(&self, path: &Path) -> bool {
        path.exists()
            && artifact::read_header(path)
                .map(|m| m.get("config_hash") == Some(&self.hash))
                .unwrap_or(false)
    }

    /// Units of work: one per simulated replicate, or a single real-data unit.
    pub fn units(&self) -> Vec<Unit> {
        match self.config.mode {
            Mode::Simulate => (0..self.config.simulation.n_datasets)
                .map(|r| Unit {
                    name: format!("rep_{r:02}"),
                    seed: derive_seed(self.config.master_seed, r as u64),
                    dir: self.out.join(format!("rep_{r:02}")),
                })
                .collect(),
            Mode::Real => vec![Unit {
                name: "real".into(),
                seed: derive_named(self.config.master_seed, "real"),
                dir: self.out.join("real"),
            }],
        }
    }
}

#[derive(Debug, Clone)]
pub struct Unit {
    pub name: String,
    pub seed: u64,
    pub dir: PathBuf,
}

pub fn proportion_dir(p: f64) -> String {
    format!("p{p:.2}")
}

// ---------------------------------------------------------------- simulate

/// `truth.json`: simulated ground truth of one replicate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthArtifact {
    pub config_hash: String,
    pub master_seed: u64,
    pub sim_seed: u64,
    pub variable_names: Vec<String>,
    /// Dataset ids with their CSV file names.
    pub datasets: Vec<(String, String)>,
    pub tau_true: Vec<f64>,
    pub truth: SimulatedTruth,
}

fn simulate_unit(run: &Run, unit: &Unit) -> Result<(TruthArtifact, Option<Vec<Level0Dataset>>)> {
    let path = unit.dir.join("truth.json");
    if let Ok(text) = std::fs::read_to_string(&path) {
        if let Ok(t) = serde_json::from_str::<TruthArtifact>(&text) {
            if t.config_hash == run.hash && t.datasets.iter().all(|(_, f)| run.current(&unit.dir.join(f))) {
                return Ok((t, None));
            }
        }
    }
    std::fs::create_dir_all(&unit.dir)?;
    let spec = &run.config.simulation;
    let sim_seed = derive_named(unit.seed, "sim");
    let sim_cfg = crate::sim::SimConfig {
        seed: sim_seed,
        ..spec.sim.clone()
    };
    run.log(format!(
        "{}: simulating {} individuals x {} SNPs",
        unit.name, sim_cfg.n_individuals, sim_cfg.n_snps
    ));
    let (full, truth) = simulate_dataset(&sim_cfg)?;
    let tau_true = true_effects(&truth, &full)?;
    let datasets: Vec<Level0Dataset> = if spec.n_subsets == 1 {
        vec![full.clone().with_id("data")]
    } else {
        let n = full.n_samples();
        let mut order: Vec<usize> = (0..n).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut crate::util::rng(derive_named(unit.seed, "subsets")));
        let d = spec.n_subsets;
        (0..d)
            .map(|k| {
                let mut rows: Vec<usize> = order[k * n / d..(k + 1) * n / d].to_vec();
                rows.sort_unstable();
                full.select_samples(&rows).map(|s| s.with_id(format!("data_s{k}")))
            })
            .collect::<Result<_>>()?
    };
    let comment = artifact::header_line(&run.provenance());
    let comment = comment.trim_start_matches("# ");
    let mut files = Vec::new();
    for ds in &datasets {
        let file = format!("{}.csv", ds.id());
        write_level0_csv(ds, unit.dir.join(&file), "y", Some(comment))?;
        files.push((ds.id().to_string(), file));
    }
    let art = TruthArtifact {
        config_hash: run.hash.clone(),
        master_seed: run.config.master_seed,
        sim_seed,
        variable_names: full.variable_names().to_vec(),
        datasets: files,
        tau_true,
        truth,
    };
    artifact::write_json(&path, &art)?;
    Ok((art, Some(datasets)))
}

// ------------------------------------------------------------------- learn

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub dataset: String,
    pub learner: String,
    pub reason: String,
}

/// `excluded.json`; also lists the learner outputs that were written.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LearnManifest {
    pub config_hash: String,
    pub master_seed: u64,
    pub outputs: Vec<String>,
    pub excluded: Vec<Exclusion>,
}

impl LearnManifest {
    pub fn excluded_names(&self) -> Vec<String> {
        self.excluded
            .iter()
            .map(|e| format!("{}/{}: {}", e.dataset, e.learner, e.reason))
            .collect()
    }
}

fn load_datasets(run: &Run, unit: &Unit) -> Result<Vec<Level0Dataset>> {
    match run.config.mode {
        Mode::Simulate => {
            let (truth, fresh) = simulate_unit(run, unit).map_err(|e| e.in_stage("simulate"))?;
            if let Some(ds) = fresh {
                return Ok(ds);
            }
            truth
                .datasets
                .iter()
                .map(|(id, f)| load_level0_csv(unit.dir.join(f), "y").map(|d| d.with_id(id.clone())))
                .collect()
        }
        Mode::Real => run.config.datasets.iter().map(load_real_dataset).collect(),
    }
}

fn load_real_dataset(spec: &crate::config::DatasetSpec) -> Result<Level0Dataset> {
    let mut ds = load_level0_csv(&spec.path, &spec.outcome_column)?;
    if let Some(id) = &spec.id {
        ds = ds.with_id(id.clone());
    }
    if let Some(f) = &spec.filter {
        let mut reader = artifact::csv_reader(&f.metadata)?;
        let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
        let find = |name: &str| {
            header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::data(format!("{}: no `{name}` column", f.metadata.display())))
        };
        let (id_col, val_col) = (find(data::SAMPLE_ID_COLUMN)?, find(&f.column)?);
        let wanted: HashSet<&str> = f.values.iter().map(String::as_str).collect();
        let mut keep = HashSet::new();
        for rec in reader.records() {
            let rec = rec?;
            if wanted.contains(rec.get(val_col).unwrap_or("")) {
                keep.insert(rec.get(id_col).unwrap_or("").to_string());
            }
        }
        let rows: Vec<usize> = (0..ds.n_samples()).filter(|&i| keep.contains(&ds.sample_ids()[i])).collect();
        if rows.is_empty() {
            return Err(Error::data(format!("filter on `{}` keeps no samples of {}", f.column, ds.id())));
        }
        ds = ds.select_samples(&rows)?;
    }
    Ok(ds)
}

fn output_file(dataset: &str, learner: &str) -> String {
    format!("learner_output_{dataset}_{learner}.csv")
}

fn factor_key(c: &DeconfounderConfig) -> String {
    serde_json::to_string(&(&c.ppca, c.check_holdout, c.check_replicates, c.seed)).unwrap_or_default()
}

/// Runs every configured learner on one dataset. The factor model of the
/// first deconfounder is shared with later deconfounders using the same
/// factor settings and supplies the CATE learner's proxies.
fn learn_dataset(
    run: &Run,
    unit: &Unit,
    ds: &Level0Dataset,
) -> Result<(Vec<LearnerOutput>, Vec<Exclusion>)> {
    let base = derive_named(unit.seed, &format!("learn/{}", ds.id()));
    let seeded_da = |c: &DeconfounderConfig| DeconfounderConfig {
        seed: derive_seed(base, c.seed),
        ..c.clone()
    };
    let mut factor: Option<(String, PpcaModel, PredictiveCheck)> = None;
    let mut outputs = Vec::new();
    let mut excluded = Vec::new();
    for spec in &expand_learners(&run.config.learners) {
        let id = spec.id();
        run.log(format!("{}: learner {id} on {}", unit.name, ds.id()));
        let result = match spec {
            LearnerSpec::Deconfounder { config, .. } => {
                let cfg = seeded_da(config);
                let key = factor_key(&cfg);
                let (ppca, check) = match &factor {
                    Some((k, p, c)) if *k == key => (p.clone(), c.clone()),
                    _ => {
                        let (p, c) = fit_and_check(ds, &cfg)?;
                        if factor.is_none() {
                            factor = Some((key, p.clone(), c.clone()));
                        }
                        (p, c)
                    }
                };
                run_da_with_factor(ds, &cfg, ppca, check).map(|f| f.output)
            }
            LearnerSpec::Cate { config, ppca, .. } => {
                let cfg = CateConfig {
                    outcome: crate::learners::enet::ElasticNetConfig {
                        seed: derive_seed(derive_named(base, "cate"), config.outcome.seed),
                        ..config.outcome.clone()
                    },
                    bootstrap: config.bootstrap.map(|b| crate::learners::bootstrap::BootstrapSpec {
                        seed: derive_seed(derive_named(base, "cate-bootstrap"), b.seed),
                        ..b
                    }),
                    ..config.clone()
                };
                let (z, mut flags) = match &factor {
                    Some((_, p, c)) => (
                        p.z.clone(),
                        if c.passed { vec![] } else { vec!["proxies-failed-check".to_string()] },
                    ),
                    None => {
                        let pc = PpcaConfig {
                            seed: derive_seed(derive_named(base, "cate-ppca"), ppca.seed),
                            ..ppca.clone()
                        };
                        (fit_ppca(ds, &pc)?.z, vec![])
                    }
                };
                cate_learner(ds, &z, &cfg).map(|mut o| {
                    o.flags.append(&mut flags);
                    o
                })
            }
            LearnerSpec::Marginal { binarize, .. } => run_marginal_learner(ds, *binarize),
        };
        match result {
            Ok(mut out) => {
                out.learner_id = id;
                out.dataset_id = ds.id().to_string();
                outputs.push(out);
            }
            Err(Error::PredictiveCheckFailed { p_value, .. }) => {
                run.log(format!("{}: {id} on {} excluded (check p = {p_value:.3})", unit.name, ds.id()));
                excluded.push(Exclusion {
                    dataset: ds.id().to_string(),
                    learner: id,
                    reason: format!("predictive check failed (p = {p_value:.4})"),
                });
            }
            Err(e) => return Err(e),
        }
    }
    Ok((outputs, excluded))
}

fn learn_unit(run: &Run, unit: &Unit) -> Result<(Vec<LearnerOutput>, LearnManifest)> {
    let path = unit.dir.join("excluded.json");
    if let Ok(text) = std::fs::read_to_string(&path) {
        if let Ok(m) = serde_json::from_str::<LearnManifest>(&text) {
            if m.config_hash == run.hash && m.outputs.iter().all(|f| run.current(&unit.dir.join(f))) {
                let outputs = m
                    .outputs
                    .iter()
                    .map(|f| read_learner_output(unit.dir.join(f)).map(|(o, _)| o))
                    .collect::<Result<Vec<_>>>()?;
                return Ok((outputs, m));
            }
        }
    }
    let datasets = load_datasets(run, unit)?;
    std::fs::create_dir_all(&unit.dir)?;
    let mut outputs = Vec::new();
    let mut excluded = Vec::new();
    for ds in &datasets {
        let (o, e) = learn_dataset(run, unit, ds).map_err(|e| e.in_stage("learn"))?;
        outputs.extend(o);
        excluded.extend(e);
    }
    if outputs.len() < 2 {
        return Err(Error::data(format!(
            "only {} learner output(s) survived; stacking needs at least 2",
            outputs.len()
        ))
        .in_stage("learn"));
    }
    let mut files = Vec::new();
    for o in &outputs {
        let file = output_file(&o.dataset_id, &o.learner_id);
        write_learner_output(o, unit.dir.join(&file), &run.provenance())?;
        files.push(file);
    }
    let manifest = LearnManifest {
        config_hash: run.hash.clone(),
        master_seed: run.config.master_seed,
        outputs: files,
        excluded,
    };
    artifact::write_json(&path, &manifest)?;
    Ok((outputs, manifest))
}

// ------------------------------------------------------------------- stack

/// Ground truth the sweep is scored against.
struct UnitTruth {
    /// Causal status per level-1 variable, in the level-1 row order.
    causes: Vec<bool>,
    /// True effects per level-1 variable (simulation only).
    tau: Option<Vec<f64>>,
}

fn unit_truth(run: &Run, unit: &Unit, variables: &[String]) -> Result<UnitTruth> {
    match run.config.mode {
        Mode::Simulate => {
            let (t, _) = simulate_unit(run, unit)?;
            let index: HashMap<&str, usize> = t
                .variable_names
                .iter()
                .enumerate()
                .map(|(i, n)| (n.as_str(), i))
                .collect();
            let mut causes = Vec::with_capacity(variables.len());
            let mut tau = Vec::with_capacity(variables.len());
            for v in variables {
                let i = *index
                    .get(v.as_str())
                    .ok_or_else(|| Error::data(format!("variable `{v}` missing from the simulated truth")))?;
                causes.push(t.truth.causal_mask[i]);
                tau.push(t.tau_true[i]);
            }
            Ok(UnitTruth { causes, tau: Some(tau) })
        }
        Mode::Real => {
            let path = run.config.known_causes.as_ref().expect("validated");
            let known = read_known_causes(path)?;
            let causes: Vec<bool> = variables.iter().map(|v| known.contains(v)).collect();
            if !causes.iter().any(|&c| c) {
                return Err(Error::data(format!(
                    "none of the known causes in {} is among the variables",
                    path.display()
                )));
            }
            Ok(UnitTruth { causes, tau: None })
        }
    }
}

/// One variable name per line; a `variable` header and `#` comments are skipped.
pub fn read_known_causes(path: &Path) -> Result<HashSet<String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::data(format!("cannot read known causes {}: {e}", path.display())))?;
    Ok(text
        .lines()
        .map(|l| l.split(',').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty() && !l.starts_with('#') && *l != "variable")
        .map(str::to_string)
        .collect())
}

fn stack_seed(unit: &Unit, p: f64, what: &str) -> u64 {
    derive_named(unit.seed, &format!("{what}/{}", proportion_dir(p)))
}

fn stack_proportion(run: &Run, unit: &Unit, p: f64, outputs: &[LearnerOutput]) -> Result<Level1Dataset> {
    let dir = unit.dir.join(proportion_dir(p));
    let path = dir.join("level1.csv");
    if run.current(&path) {
        return Ok(read_level1_csv(&path)?.0);
    }
    std::fs::create_dir_all(&dir)?;
    // Level-1 rows follow the variable order of the first output by (dataset, learner).
    let first = outputs
        .iter()
        .min_by(|a, b| (&a.dataset_id, &a.learner_id).cmp(&(&b.dataset_id, &b.learner_id)))
        .ok_or_else(|| Error::data("no learner outputs to stack"))?;
    let truth = unit_truth(run, unit, &first.variable_names)?;
    let labels = mask_known_causes(&truth.causes, p, stack_seed(unit, p, "mask"))?;
    let l1 = assemble(outputs, &labels, run.config.level1.zero_noncausal)?;
    let l1 = split_variables(&l1, run.config.level1.train_fraction, stack_seed(unit, p, "split"))?;
    write_level1_csv(&l1, &path, &run.provenance())?;
    Ok(l1)
}

// -------------------------------------------------------------------- meta

/// `meta_models.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetaArtifact {
    pub config_hash: String,
    pub master_seed: u64,
    pub meta_seed: u64,
    pub models: Vec<MetaSummary>,
    pub te_regressor: Option<TeMetaRegressor>,
}

/// Signed, train-standardized features for the effect regressor.
pub const TE_FEATURES: FeatureTransform = FeatureTransform {
    magnitude: false,
    standardize: true,
};

/// Fits the effect meta-regressor on the training rows. Targets are the true
/// effects of revealed causes and 0 for every other training variable.
pub fn fit_te_on_revealed(l1: &Level1Dataset, tau: &[f64]) -> Result<TeMetaRegressor> {
    let split = l1.split()?;
    let x = l1.features(TE_FEATURES)?.select_rows(&split.train);
    let labels = l1.labels.labels();
    let target: Vec<f64> = split.train.iter().map(|&i| if labels[i] { tau[i] } else { 0.0 }).collect();
    fit_te_regressor(&x, &target)
}

fn meta_proportion(run: &Run, unit: &Unit, p: f64, l1: &Level1Dataset) -> Result<(Predictions, MetaArtifact)> {
    let dir = unit.dir.join(proportion_dir(p));
    let (pred_path, model_path) = (dir.join("predictions.csv"), dir.join("meta_models.json"));
    if run.current(&pred_path) {
        if let Ok(text) = std::fs::read_to_string(&model_path) {
            if let Ok(m) = serde_json::from_str::<MetaArtifact>(&text) {
                if m.config_hash == run.hash {
                    return Ok((read_predictions(&pred_path)?, m));
                }
            }
        }
    }
    let meta_seed = derive_seed(stack_seed(unit, p, "meta"), run.config.meta.seed);
    let cfg = meta::MetaConfig {
        seed: meta_seed,
        ..run.config.meta.clone()
    };
    let models = fit_all(l1, &cfg)?;
    let mut preds = predict_test(&models, l1, cfg.features)?;
    let mut te_regressor = None;
    if run.config.mode == Mode::Simulate {
        let truth = unit_truth(run, unit, &l1.variable_names)?;
        let tau = truth.tau.expect("simulation has effects");
        let te = fit_te_on_revealed(l1, &tau)?;
        let x = l1.features(TE_FEATURES)?.select_rows(&preds.rows);
        preds.te_estimate = Some(te.predict(&x));
        te_regressor = Some(te);
    }
    write_predictions(&preds, &pred_path, &run.provenance())?;
    let art = MetaArtifact {
        config_hash: run.hash.clone(),
        master_seed: run.config.master_seed,
        meta_seed,
        models: models.iter().map(meta::summarize).collect(),
        te_regressor,
    };
    artifact::write_json(&model_path, &art)?;
    Ok((preds, art))
}

// -------------------------------------------------------------------- eval

fn eval_proportion(
    run: &Run,
    unit: &Unit,
    p: f64,
    l1: &Level1Dataset,
    preds: &Predictions,
    art: &MetaArtifact,
    learn: &LearnManifest,
) -> Result<MetricsReport> {
    let path = unit.dir.join(proportion_dir(p)).join("metrics.json");
    if let Ok(text) = std::fs::read_to_string(&path) {
        if let Ok(m) = serde_json::from_str::<MetricsReport>(&text) {
            if m.config_hash == run.hash {
                return Ok(m);
            }
        }
    }
    let truth = unit_truth(run, unit, &l1.variable_names)?;
    let rows = &preds.rows;
    let test_truth: Vec<bool> = rows.iter().map(|&i| truth.causes[i]).collect();
    let learners: Vec<ModelCalls> = l1
        .feature_names
        .iter()
        .enumerate()
        .map(|(f, name)| ModelCalls {
            name: name.clone(),
            role: ModelRole::Learner,
            calls: rows.iter().map(|&i| l1.calls[f][i]).collect(),
            scores: rows.iter().map(|&i| l1.d1[(i, f)].abs()).collect(),
        })
        .collect();
    let metas: Vec<ModelCalls> = preds
        .models
        .iter()
        .enumerate()
        .map(|(m, name)| ModelCalls {
            name: name.clone(),
            role: if name == MetaKind::Random.name() {
                ModelRole::Baseline
            } else {
                ModelRole::Meta
            },
            calls: preds.calls[m].clone(),
            scores: preds.scores[m].clone(),
        })
        .collect();
    let mut report = compare_learners_vs_meta(&learners, &metas, &test_truth)?;
    if let (Some(tau), Some(te)) = (&truth.tau, &preds.te_estimate) {
        let tau_test: Vec<f64> = rows.iter().map(|&i| tau[i]).collect();
        let stacked = pehe(te, &tau_test)?;
        report.pehe_sq = Some(stacked.sq);
        report.pehe_raw = Some(stacked.raw);
        report.pehe_by_model.push(PeheRow {
            model: TE_MODEL.into(),
            pehe_sq: stacked.sq,
            pehe_raw: stacked.raw,
        });
        for (f, name) in l1.feature_names.iter().enumerate() {
            let phi: Vec<f64> = rows.iter().map(|&i| l1.d1[(i, f)]).collect();
            let e = pehe(&phi, &tau_test)?;
            report.pehe_by_model.push(PeheRow {
                model: name.clone(),
                pehe_sq: e.sq,
                pehe_raw: e.raw,
            });
        }
    }
    report.proportion = Some(p);
    report.excluded = learn.excluded_names();
    report.seeds = serde_json::json!({
        "master_seed": run.config.master_seed,
        "unit_seed": unit.seed,
        "mask_seed": stack_seed(unit, p, "mask"),
        "split_seed": stack_seed(unit, p, "split"),
        "meta_seed": art.meta_seed,
    });
    report.config_hash = run.hash.clone();
    artifact::write_json(&path, &report)?;
    Ok(report)
}

// ---------------------------------------------------------------- commands

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Simulate,
    Learn,
    Stack,
    Meta,
    Eval,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::Learn => "learn",
            Stage::Stack => "stack",
            Stage::Meta => "meta",
            Stage::Eval => "eval",
        }
    }
}

/// Metrics of one unit at one masking proportion.
#[derive(Debug, Clone)]
pub struct UnitReport {
    pub unit: String,
    pub proportion: f64,
    pub report: MetricsReport,
}

/// Runs all stages up to `last`, reusing current artifacts.
pub fn run_until(run: &Run, last: Stage) -> Result<Vec<UnitReport>> {
    if last == Stage::Simulate && run.config.mode != Mode::Simulate {
        return Err(Error::config("`simulate` needs a config with mode \"simulate\""));
    }
    let mut reports = Vec::new();
    for unit in run.units() {
        if last == Stage::Simulate {
            simulate_unit(run, &unit).map_err(|e| e.in_stage("simulate"))?;
            continue;
        }
        let (outputs, manifest) = learn_unit(run, &unit)?;
        if last == Stage::Learn {
            continue;
        }
        for &p in &run.config.masking {
            run.log(format!("{}: proportion {p}", unit.name));
            let l1 = stack_proportion(run, &unit, p, &outputs).map_err(|e| e.in_stage("stack"))?;
            if last == Stage::Stack {
                continue;
            }
            let (preds, art) = meta_proportion(run, &unit, p, &l1).map_err(|e| e.in_stage("meta"))?;
            if last == Stage::Meta {
                continue;
            }
            let report =
                eval_proportion(run, &unit, p, &l1, &preds, &art, &manifest).map_err(|e| e.in_stage("eval"))?;
            reports.push(UnitReport {
                unit: unit.name.clone(),
                proportion: p,
                report,
            });
        }
    }
    if last == Stage::Eval {
        write_sweep(run, &reports).map_err(|e| e.in_stage("eval"))?;
    }
    Ok(reports)
}

pub fn cmd_simulate(run: &Run) -> Result<()> {
    run_until(run, Stage::Simulate).map(|_| ())
}

pub fn cmd_learn(run: &Run) -> Result<()> {
    run_until(run, Stage::Learn).map(|_| ())
}

pub fn cmd_stack(run: &Run) -> Result<()> {
    run_until(run, Stage::Stack).map(|_| ())
}

pub fn cmd_meta(run: &Run) -> Result<()> {
    run_until(run, Stage::Meta).map(|_| ())
}

pub fn cmd_eval(run: &Run) -> Result<Vec<UnitReport>> {
    run_until(run, Stage::Eval)
}

/// The full sweep; identical to `eval` on a fresh directory.
pub fn cmd_pipeline(run: &Run) -> Result<Vec<UnitReport>> {
    run_until(run, Stage::Eval)
}

// ------------------------------------------------------------------- sweep

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub unit: String,
    pub proportion: f64,
    pub model: String,
    pub role: String,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub auc: Option<f64>,
    pub pehe_sq: Option<f64>,
}

fn role_name(r: ModelRole) -> &'static str {
    match r {
        ModelRole::Learner => "learner",
        ModelRole::Meta => "meta",
        ModelRole::Baseline => "baseline",
    }
}

/// Flattens reports into one row per (unit, proportion, model); the effect
/// regressor contributes a row carrying only its PEHE.
pub fn sweep_rows(reports: &[UnitReport]) -> Vec<SweepRow> {
    let mut rows = Vec::new();
    for u in reports {
        let r = &u.report;
        let pehe_of = |m: &str| r.pehe_by_model.iter().find(|p| p.model == m).map(|p| p.pehe_sq);
        for i in 0..r.models.len() {
            rows.push(SweepRow {
                unit: u.unit.clone(),
                proportion: u.proportion,
                model: r.models[i].clone(),
                role: role_name(r.roles[i]).into(),
                precision: Some(r.precision[i]),
                recall: Some(r.recall[i]),
                f1: Some(r.f1[i]),
                auc: r.auc[i],
                pehe_sq: pehe_of(&r.models[i]),
            });
        }
        if let Some(sq) = r.pehe_sq {
            rows.push(SweepRow {
                unit: u.unit.clone(),
                proportion: u.proportion,
                model: TE_MODEL.into(),
                role: role_name(ModelRole::Meta).into(),
                precision: None,
                recall: None,
                f1: None,
                auc: None,
                pehe_sq: Some(sq),
            });
        }
    }
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummaryRow {
    pub proportion: f64,
    pub model: String,
    pub role: String,
    pub n: usize,
    pub mean_f1: Option<f64>,
    pub sd_f1: Option<f64>,
    pub mean_pehe_sq: Option<f64>,
}

fn mean_sd(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    let sd = if xs.len() > 1 {
        Some((xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt())
    } else {
        None
    };
    (Some(m), sd)
}

/// Mean and sample SD of F1 over units, per proportion and model.
pub fn summarize_sweep(rows: &[SweepRow]) -> Vec<SweepSummaryRow> {
    let mut groups: BTreeMap<(String, String), Vec<&SweepRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((proportion_dir(r.proportion), r.model.clone())).or_default().push(r);
    }
    let mut out: Vec<SweepSummaryRow> = groups
        .into_values()
        .map(|g| {
            let f1: Vec<f64> = g.iter().filter_map(|r| r.f1).collect();
            let pehe: Vec<f64> = g.iter().filter_map(|r| r.pehe_sq).collect();
            let (mean_f1, sd_f1) = mean_sd(&f1);
            SweepSummaryRow {
                proportion: g[0].proportion,
                model: g[0].model.clone(),
                role: g[0].role.clone(),
                n: g.len(),
                mean_f1,
                sd_f1,
                mean_pehe_sq: mean_sd(&pehe).0,
            }
        })
        .collect();
    out.sort_by(|a, b| {
        a.proportion
            .total_cmp(&b.proportion)
            .then(b.mean_f1.unwrap_or(f64::NEG_INFINITY).total_cmp(&a.mean_f1.unwrap_or(f64::NEG_INFINITY)))
    });
    out
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

fn write_sweep(run: &Run, reports: &[UnitReport]) -> Result<()> {
    let rows = sweep_rows(reports);
    let mut w = artifact::csv_writer(run.out.join("sweep.csv"), &run.provenance())?;
    w.write_record(["unit", "proportion", "model", "role", "precision", "recall", "f1", "auc", "pehe_sq"])?;
    for r in &rows {
        w.write_record([
            r.unit.clone(),
            format!("{}", r.proportion),
            r.model.clone(),
            r.role.clone(),
            opt(r.precision),
            opt(r.recall),
            opt(r.f1),
            opt(r.auc),
            opt(r.pehe_sq),
        ])?;
    }
    w.flush()?;
    let mut w = artifact::csv_writer(run.out.join("sweep_summary.csv"), &run.provenance())?;
    w.write_record(["proportion", "model", "role", "n", "mean_f1", "sd_f1", "mean_pehe_sq"])?;
    for s in summarize_sweep(&rows) {
        w.write_record([
            format!("{}", s.proportion),
            s.model,
            s.role,
            s.n.to_string(),
            opt(s.mean_f1),
            opt(s.sd_f1),
            opt(s.mean_pehe_sq),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learners::bootstrap::BootstrapSpec;
    use crate::sim::SimConfig;

    fn tiny_config() -> RunConfig {
        let mut cfg = RunConfig::simulated(
            SimConfig {
                n_individuals: 300,
                n_snps: 150,
                ..SimConfig::default()
            },
            1,
        );
        for l in &mut cfg.learners {
            if let LearnerSpec::Deconfounder { config, .. } = l {
                config.ppca.k = 3;
                config.check_replicates = 20;
                config.bootstrap = BootstrapSpec { replicates: 20, seed: 0 };
                config.enforce_check = false;
            }
        }
        cfg.meta.rf.n_trees = 20;
        cfg.meta.nn.max_epochs = 100;
        cfg.masking = vec![0.5, 1.0];
        cfg
    }

    #[test]
    fn full_run_writes_every_artifact_and_resumes() {
        let dir = tempfile::tempdir().unwrap();
        let opts = RunOptions {
            out: Some(dir.path().to_path_buf()),
            ..RunOptions::default()
        };
        let run = Run::open(tiny_config(), &opts).unwrap();
        let reports = cmd_pipeline(&run).unwrap();
        assert_eq!(reports.len(), 2);
        let rep = dir.path().join("rep_00");
        for f in ["data.csv", "truth.json", "excluded.json", "learner_output_data_marginal.csv"] {
            assert!(rep.join(f).exists(), "{f}");
        }
        for f in ["level1.csv", "predictions.csv", "meta_models.json", "metrics.json"] {
            assert!(rep.join("p0.50").join(f).exists(), "{f}");
        }
        let first = std::fs::read_to_string(rep.join("p0.50/metrics.json")).unwrap();
        assert!(first.contains(&run.hash));
        assert!(reports[0].report.pehe_sq.is_some());

        // Removing a late artifact recomputes only that stage, identically.
        std::fs::remove_file(rep.join("p0.50/metrics.json")).unwrap();
        let again = Run::open(tiny_config(), &opts).unwrap();
        cmd_eval(&again).unwrap();
        assert_eq!(std::fs::read_to_string(rep.join("p0.50/metrics.json")).unwrap(), first);

        let rows = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
        let n_models = reports[0].report.models.len() + 1;
        assert_eq!(rows.lines().count(), 2 + 2 * n_models);
    }

    #[test]
    fn foreign_output_dir_needs_force() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("stray.txt"), "x").unwrap();
        let mut opts = RunOptions {
            out: Some(dir.path().to_path_buf()),
            ..RunOptions::default()
        };
        let err = Run::open(tiny_config(), &opts).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        opts.force = true;
        Run::open(tiny_config(), &opts).unwrap();
        assert!(!dir.path().join("stray.txt").exists());
    }

    #[test]
    fn simulate_refuses_real_mode() {
        let mut cfg = tiny_config();
        cfg.mode = Mode::Real;
        cfg.datasets = vec![crate::config::DatasetSpec {
            path: "missing.csv".into(),
            outcome_column: "y".into(),
            id: None,
            filter: None,
        }];
        cfg.known_causes = Some("k.txt".into());
        let dir = tempfile::tempdir().unwrap();
        let run = Run::open(
            cfg,
            &RunOptions {
                out: Some(dir.path().to_path_buf()),
                ..RunOptions::default()
            },
        )
        .unwrap();
        assert_eq!(cmd_simulate(&run).unwrap_err().exit_code(), 2);
        let err = cmd_learn(&run).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn summary_groups_by_proportion_and_model() {
        let row = |unit: &str, f1: f64| SweepRow {
            unit: unit.into(),
            proportion: 0.5,
            model: "LR".into(),
            role: "meta".into(),
            precision: Some(f1),
            recall: Some(f1),
            f1: Some(f1),
            auc: None,
            pehe_sq: None,
        };
        let s = summarize_sweep(&[row("a", 0.2), row("b", 0.4)]);
        assert_eq!(s.len(), 1);
        assert!((s[0].mean_f1.unwrap() - 0.3).abs() < 1e-12);
        assert!((s[0].sd_f1.unwrap() - 0.02f64.sqrt()).abs() < 1e-12);
    }
}
