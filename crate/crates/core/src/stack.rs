//! Level-1 data: one row per candidate cause, one column per
//! (dataset, learner) output.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::data::{stratified_split, KnownCauseLabels, DEFAULT_TRAIN_FRACTION};
use crate::error::{Error, Result};
use crate::learners::LearnerOutput;
use crate::util::Standardizer;

/// Train/test partition of the variables (level-1 rows).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub train_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Level1Dataset {
    /// `V × (L·d)`.
    pub d1: DMatrix<f64>,
    /// `dataset_id/learner_id`, in column order.
    pub feature_names: Vec<String>,
    pub variable_names: Vec<String>,
    pub labels: KnownCauseLabels,
    /// Binary calls of each source output, aligned with `feature_names`.
    pub calls: Vec<Vec<bool>>,
    pub zero_noncausal: bool,
    pub row_split: Option<RowSplit>,
}

pub fn feature_name(output: &LearnerOutput) -> String {
    format!("{}/{}", output.dataset_id, output.learner_id)
}

/// Stacks learner outputs column-wise, sorted by `(dataset_id, learner_id)`.
///
/// Rows follow the variable order of the first output after sorting; the
/// other outputs are aligned to it by name. `labels` must use that order.
pub fn assemble(outputs: &[LearnerOutput], labels: &KnownCauseLabels, zero_noncausal: bool) -> Result<Level1Dataset> {
    if outputs.len() < 2 {
        return Err(Error::config(format!(
            "level-1 data needs at least 2 learner outputs, got {}",
            outputs.len()
        )));
    }
    let mut sorted: Vec<&LearnerOutput> = outputs.iter().collect();
    sorted.sort_by(|a, b| (&a.dataset_id, &a.learner_id).cmp(&(&b.dataset_id, &b.learner_id)));
    for pair in sorted.windows(2) {
        if pair[0].dataset_id == pair[1].dataset_id && pair[0].learner_id == pair[1].learner_id {
            return Err(Error::data(format!("duplicate learner output {}", feature_name(pair[0]))));
        }
    }
    for out in &sorted {
        out.validate()?;
    }

    let names = sorted[0].variable_names.clone();
    let reference: BTreeSet<&String> = names.iter().collect();
    if reference.len() != names.len() {
        return Err(Error::data(format!("{} repeats variable names", feature_name(sorted[0]))));
    }
    for out in &sorted[1..] {
        let other: BTreeSet<&String> = out.variable_names.iter().collect();
        if other != reference || out.variable_names.len() != names.len() {
            let diff: Vec<&str> = reference
                .symmetric_difference(&other)
                .take(10)
                .map(|s| s.as_str())
                .collect();
            return Err(Error::data(format!(
                "{} and {} cover different variables (e.g. {})",
                feature_name(sorted[0]),
                feature_name(out),
                diff.join(", ")
            )));
        }
    }
    if labels.len() != names.len() {
        return Err(Error::data(format!(
            "{} labels for {} variables",
            labels.len(),
            names.len()
        )));
    }

    let v = names.len();
    let mut d1 = DMatrix::zeros(v, sorted.len());
    let mut calls = Vec::with_capacity(sorted.len());
    for (j, out) in sorted.iter().enumerate() {
        let pos: HashMap<&String, usize> = out.variable_names.iter().enumerate().map(|(i, n)| (n, i)).collect();
        let mut col_calls = Vec::with_capacity(v);
        for (r, name) in names.iter().enumerate() {
            let i = pos[name];
            let call = out.causal_call[i];
            d1[(r, j)] = if zero_noncausal && !call { 0.0 } else { out.phi[i] };
            col_calls.push(call);
        }
        calls.push(col_calls);
    }
    Ok(Level1Dataset {
        d1,
        feature_names: sorted.iter().map(|o| feature_name(o)).collect(),
        variable_names: names,
        labels: labels.clone(),
        calls,
        zero_noncausal,
        row_split: None,
    })
}

impl Level1Dataset {
    pub fn n_variables(&self) -> usize {
        self.d1.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.d1.ncols()
    }

    pub fn split(&self) -> Result<&RowSplit> {
        self.row_split
            .as_ref()
            .ok_or_else(|| Error::config("level-1 rows have not been split"))
    }

    pub fn train_labels(&self) -> Result<Vec<bool>> {
        let l = self.labels.labels();
        Ok(self.split()?.train.iter().map(|&i| l[i]).collect())
    }

    /// Learner ids without the dataset prefix, deduplicated, in column order.
    pub fn learner_ids(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.feature_names
            .iter()
            .map(|f| f.rsplit('/').next().unwrap_or(f).to_string())
            .filter(|l| seen.insert(l.clone()))
            .collect()
    }

    /// Meta-learner design matrix for every row: features (optionally `|φ|`)
    /// standardized with train-row statistics.
    pub fn features(&self, transform: FeatureTransform) -> Result<DMatrix<f64>> {
        let mut x = self.d1.clone();
        if transform.magnitude {
            x.apply(|v| *v = v.abs());
        }
        if transform.standardize {
            let train = &self.split()?.train;
            x = Standardizer::fit_rows(&x, Some(train)).transform(&x);
        }
        Ok(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureTransform {
    /// Use `|φ|`: causes can push the outcome either way.
    pub magnitude: bool,
    pub standardize: bool,
}

impl Default for FeatureTransform {
    fn default() -> Self {
        FeatureTransform {
            magnitude: true,
            standardize: true,
        }
    }
}

/// Label-stratified split of the variables; both parts keep a positive.
pub fn split_variables(l1: &Level1Dataset, train_fraction: f64, seed: u64) -> Result<Level1Dataset> {
    if l1.labels.n_positive() < 2 {
        return Err(Error::data(format!(
            "{} known cause(s); splitting needs at least 2",
            l1.labels.n_positive()
        )));
    }
    let (train, test) = stratified_split(l1.labels.labels(), train_fraction, seed)?;
    let mut out = l1.clone();
    out.row_split = Some(RowSplit {
        train,
        test,
        train_fraction,
    });
    Ok(out)
}

pub fn default_split(l1: &Level1Dataset, seed: u64) -> Result<Level1Dataset> {
    split_variables(l1, DEFAULT_TRAIN_FRACTION, seed)
}

/// Writes `variable, <features>..., label, split, call:<feature>...`.
pub fn write_level1_csv(l1: &Level1Dataset, path: impl AsRef<Path>, provenance: &[(&str, String)]) -> Result<()> {
    let mut meta: Vec<(&str, String)> = vec![
        ("zero_noncausal", l1.zero_noncausal.to_string()),
        (
            "masked_fraction",
            l1.labels.masked_fraction().map(|f| f.to_string()).unwrap_or_default(),
        ),
        (
            "train_fraction",
            l1.row_split.as_ref().map(|s| s.train_fraction.to_string()).unwrap_or_default(),
        ),
    ];
    meta.extend(provenance.iter().cloned());
    let mut w = artifact::csv_writer(path, &meta)?;
    let mut header = vec!["variable".to_string()];
    header.extend(l1.feature_names.iter().cloned());
    header.push("label".into());
    header.push("split".into());
    header.extend(l1.feature_names.iter().map(|f| format!("call:{f}")));
    w.write_record(&header)?;
    let mut side = vec![""; l1.n_variables()];
    if let Some(s) = &l1.row_split {
        for &i in &s.train {
            side[i] = "train";
        }
        for &i in &s.test {
            side[i] = "test";
        }
    }
    for r in 0..l1.n_variables() {
        let mut rec = vec![l1.variable_names[r].clone()];
        rec.extend(l1.d1.row(r).iter().map(|v| format!("{v}")));
        rec.push((l1.labels.labels()[r] as u8).to_string());
        rec.push(side[r].to_string());
        rec.extend(l1.calls.iter().map(|c| (c[r] as u8).to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_level1_csv(path: impl AsRef<Path>) -> Result<(Level1Dataset, HashMap<String, String>)> {
    let path = path.as_ref();
    let meta = artifact::read_header(path)?;
    let mut reader = artifact::csv_reader(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let label_at = header
        .iter()
        .position(|h| h == "label")
        .ok_or_else(|| Error::data(format!("{}: no `label` column", path.display())))?;
    let feature_names: Vec<String> = header[1..label_at].to_vec();
    let f = feature_names.len();
    if header.len() != label_at + 2 + f {
        return Err(Error::data(format!("{}: unexpected column layout", path.display())));
    }
    let mut names = Vec::new();
    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut calls = vec![Vec::new(); f];
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (r, rec) in reader.records().enumerate() {
        let rec = rec?;
        names.push(rec[0].to_string());
        for j in 0..f {
            let v: f64 = rec[1 + j]
                .parse()
                .map_err(|_| Error::data(format!("{}: bad value at row {}, column {}", path.display(), r + 1, header[1 + j])))?;
            values.push(v);
        }
        labels.push(&rec[label_at] == "1");
        match &rec[label_at + 1] {
            "train" => train.push(r),
            "test" => test.push(r),
            _ => {}
        }
        for (j, c) in calls.iter_mut().enumerate() {
            c.push(&rec[label_at + 2 + j] == "1");
        }
    }
    let v = names.len();
    let d1 = DMatrix::from_row_slice(v, f, &values);
    let masked = meta.get("masked_fraction").and_then(|s| s.parse().ok());
    let row_split = if train.is_empty() && test.is_empty() {
        None
    } else {
        Some(RowSplit {
            train,
            test,
            train_fraction: meta
                .get("train_fraction")
                .and_then(|s| s.parse().ok())
                .unwrap_or(DEFAULT_TRAIN_FRACTION),
        })
    };
    let l1 = Level1Dataset {
        d1,
        feature_names,
        variable_names: names,
        labels: KnownCauseLabels::new(labels, masked)?,
        calls,
        zero_noncausal: meta.get("zero_noncausal").map(|s| s == "true").unwrap_or(false),
        row_split,
    };
    Ok((l1, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn output(ds: &str, learner: &str, v: usize, scale: f64) -> LearnerOutput {
        LearnerOutput {
            dataset_id: ds.into(),
            learner_id: learner.into(),
            variable_names: (0..v).map(|i| format!("v{i}")).collect(),
            phi: (0..v).map(|i| scale * i as f64).collect(),
            p_values: None,
            causal_call: (0..v).map(|i| i % 3 == 0).collect(),
            n_bootstrap: 0,
            flags: vec![],
        }
    }

    fn labels(v: usize) -> KnownCauseLabels {
        KnownCauseLabels::new((0..v).map(|i| i % 10 == 0).collect(), Some(1.0)).unwrap()
    }

    #[test]
    fn shape_and_order() {
        let outs = vec![output("b", "x", 100, 1.0), output("a", "y", 100, 2.0), output("a", "x", 100, 3.0)];
        let l1 = assemble(&outs, &labels(100), false).unwrap();
        assert_eq!(l1.d1.shape(), (100, 3));
        assert_eq!(l1.feature_names, vec!["a/x", "a/y", "b/x"]);
        assert_eq!(l1.d1[(5, 0)], 15.0);
        let mut rev = outs.clone();
        rev.reverse();
        assert_eq!(assemble(&rev, &labels(100), false).unwrap(), l1);
    }

    #[test]
    fn zeroing_and_alignment_by_name() {
        let mut a = output("a", "x", 6, 1.0);
        a.causal_call = vec![false; 6];
        let mut b = output("a", "y", 6, 1.0);
        b.variable_names.reverse();
        b.phi.reverse();
        b.causal_call.reverse();
        let l1 = assemble(&[a, b], &labels(6), true).unwrap();
        assert!(l1.d1.column(0).iter().all(|&v| v == 0.0));
        assert_eq!(l1.d1[(3, 1)], 3.0);
        assert_eq!(l1.d1[(4, 1)], 0.0);
    }

    #[test]
    fn mismatches_are_errors() {
        let a = output("a", "x", 5, 1.0);
        let mut b = output("a", "y", 5, 1.0);
        b.variable_names[4] = "w".into();
        let err = assemble(&[a.clone(), b], &labels(5), false).unwrap_err().to_string();
        assert!(err.contains("v4") && err.contains('w'), "{err}");
        assert!(assemble(&[a.clone(), a.clone()], &labels(5), false).is_err());
        assert!(assemble(&[a], &labels(5), false).is_err());
    }

    #[test]
    fn split_is_stratified_and_deterministic() {
        let outs = vec![output("a", "x", 1000, 1.0), output("a", "y", 1000, 1.0)];
        let l1 = assemble(&outs, &labels(1000), false).unwrap();
        let s = split_variables(&l1, 0.67, 3).unwrap();
        let sp = s.split().unwrap();
        assert_eq!(sp.train.len() + sp.test.len(), 1000);
        let pos = sp.train.iter().filter(|&&i| i % 10 == 0).count();
        assert!((66..=68).contains(&pos), "{pos}");
        assert_eq!(split_variables(&l1, 0.5, 9).unwrap(), split_variables(&l1, 0.5, 9).unwrap());
        let one = KnownCauseLabels::new((0..1000).map(|i| i == 0).collect(), None).unwrap();
        let l1 = assemble(&outs, &one, false).unwrap();
        assert!(split_variables(&l1, 0.67, 3).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let outs = vec![output("a", "x", 30, 0.5), output("a", "y", 30, -1.25)];
        let l1 = split_variables(&assemble(&outs, &labels(30), false).unwrap(), 0.67, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("level1.csv");
        write_level1_csv(&l1, &p, &[("config_hash", "h".into())]).unwrap();
        let (back, meta) = read_level1_csv(&p).unwrap();
        assert_eq!(back, l1);
        assert_eq!(meta["config_hash"], "h");
    }

    #[test]
    fn features_use_train_statistics() {
        let outs = vec![output("a", "x", 30, 1.0), output("a", "y", 30, -2.0)];
        let l1 = split_variables(&assemble(&outs, &labels(30), false).unwrap(), 0.67, 1).unwrap();
        let x = l1.features(FeatureTransform::default()).unwrap();
        let train = &l1.split().unwrap().train;
        for j in 0..2 {
            let m: f64 = train.iter().map(|&i| x[(i, j)]).sum::<f64>() / train.len() as f64;
            assert!(m.abs() < 1e-12);
        }
        // |φ| makes the two columns identical after scaling.
        assert!((x.column(0) - x.column(1)).abs().max() < 1e-12);
    }
}
