//! Level-0 datasets, sample splits and known-cause labels.
//!
//! A [`Level0Dataset`] stores samples as rows and candidate causes as columns,
//! which is the orientation of the ingestion CSV. Learners consume the
//! transposed view (variables as rows) conceptually: every learner emits one
//! value per column of `x`.

use std::collections::HashSet;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::util::{self, ceil_fraction};

/// Column name that, when present in an input CSV, carries sample identifiers.
pub const SAMPLE_ID_COLUMN: &str = "sample_id";

#[derive(Debug, Clone, PartialEq)]
pub struct Level0Dataset {
    id: String,
    x: DMatrix<f64>,
    y0: Vec<f64>,
    variable_names: Vec<String>,
    sample_ids: Vec<String>,
}

impl Level0Dataset {
    /// Builds a validated dataset.
    ///
    /// Requires finite entries, a 0/1 outcome with both classes present, unique
    /// variable names, and dimensions that agree.
    pub fn new(
        id: impl Into<String>,
        x: DMatrix<f64>,
        y0: Vec<f64>,
        variable_names: Vec<String>,
        sample_ids: Vec<String>,
    ) -> Result<Self> {
        let id = id.into();
        if x.nrows() != y0.len() {
            return Err(Error::data(format!(
                "dataset `{id}`: {} rows but {} outcome values",
                x.nrows(),
                y0.len()
            )));
        }
        if x.ncols() != variable_names.len() {
            return Err(Error::data(format!(
                "dataset `{id}`: {} columns but {} variable names",
                x.ncols(),
                variable_names.len()
            )));
        }
        if sample_ids.len() != y0.len() {
            return Err(Error::data(format!(
                "dataset `{id}`: {} sample ids for {} samples",
                sample_ids.len(),
                y0.len()
            )));
        }
        if let Some(pos) = x.iter().position(|v| !v.is_finite()) {
            let (r, c) = (pos % x.nrows(), pos / x.nrows());
            return Err(Error::data(format!(
                "dataset `{id}`: non-finite value at sample {} variable `{}`",
                r + 1,
                variable_names[c]
            )));
        }
        if let Some(bad) = y0.iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::data(format!("dataset `{id}`: outcome value {bad} is not binary")));
        }
        let positives = y0.iter().filter(|&&v| v == 1.0).count();
        if positives == 0 || positives == y0.len() {
            return Err(Error::data(format!("dataset `{id}`: single-class outcome")));
        }
        let mut seen = HashSet::with_capacity(variable_names.len());
        for name in &variable_names {
            if !seen.insert(name.as_str()) {
                return Err(Error::data(format!("dataset `{id}`: duplicate variable name `{name}`")));
            }
        }
        Ok(Level0Dataset {
            id,
            x,
            y0,
            variable_names,
            sample_ids,
        })
    }

    /// Convenience constructor with generated sample ids `s0, s1, ...`.
    pub fn from_parts(
        id: impl Into<String>,
        x: DMatrix<f64>,
        y0: Vec<f64>,
        variable_names: Vec<String>,
    ) -> Result<Self> {
        let sample_ids = (0..x.nrows()).map(|i| format!("s{i}")).collect();
        Self::new(id, x, y0, variable_names, sample_ids)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y0(&self) -> &[f64] {
        &self.y0
    }

    pub fn variable_names(&self) -> &[String] {
        &self.variable_names
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn n_samples(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_variables(&self) -> usize {
        self.x.ncols()
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    /// Same covariates with a replaced outcome (e.g. a permutation null).
    pub fn with_outcome(&self, y0: Vec<f64>) -> Result<Self> {
        Self::new(
            self.id.clone(),
            self.x.clone(),
            y0,
            self.variable_names.clone(),
            self.sample_ids.clone(),
        )
    }

    /// Restricts to the given sample rows, in the given order.
    pub fn select_samples(&self, rows: &[usize]) -> Result<Self> {
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.n_samples()) {
            return Err(Error::data(format!("sample index {bad} out of range")));
        }
        let x = self.x.select_rows(rows);
        let y0 = rows.iter().map(|&r| self.y0[r]).collect();
        let ids = rows.iter().map(|&r| self.sample_ids[r].clone()).collect();
        Self::new(self.id.clone(), x, y0, self.variable_names.clone(), ids)
    }

    /// Samples-as-rows view of the covariates with names on both axes.
    pub fn matrix_view(&self) -> NamedMatrix {
        NamedMatrix {
            values: self.x.clone(),
            row_names: self.sample_ids.clone(),
            col_names: self.variable_names.clone(),
        }
    }

    /// Variables-as-rows view: the orientation the learners reason about.
    pub fn transposed(&self) -> NamedMatrix {
        self.matrix_view().transpose()
    }
}

/// A dense matrix with row and column labels.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedMatrix {
    pub values: DMatrix<f64>,
    pub row_names: Vec<String>,
    pub col_names: Vec<String>,
}

impl NamedMatrix {
    pub fn transpose(&self) -> NamedMatrix {
        NamedMatrix {
            values: self.values.transpose(),
            row_names: self.col_names.clone(),
            col_names: self.row_names.clone(),
        }
    }
}

/// Reads a samples-as-rows CSV. Lines starting with `#` are ignored, an
/// optional `sample_id` column supplies sample identifiers, and every other
/// column except `outcome_column` becomes a variable, in file order.
pub fn load_level0_csv(path: impl AsRef<Path>, outcome_column: &str) -> Result<Level0Dataset> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::data(format!("input file {} does not exist", path.display())));
    }
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let outcome_idx = headers
        .iter()
        .position(|h| h == outcome_column)
        .ok_or_else(|| Error::data(format!("outcome column `{outcome_column}` not found in {}", path.display())))?;
    let id_idx = headers.iter().position(|h| h == SAMPLE_ID_COLUMN);
    let var_cols: Vec<usize> = (0..headers.len())
        .filter(|&c| c != outcome_idx && Some(c) != id_idx)
        .collect();
    let variable_names: Vec<String> = var_cols.iter().map(|&c| headers[c].clone()).collect();

    let mut values = Vec::new();
    let mut y0 = Vec::new();
    let mut sample_ids = Vec::new();
    for (row_no, record) in reader.records().enumerate() {
        let record = record?;
        let line = row_no + 1;
        let parse = |c: usize| -> Result<f64> {
            let cell = record.get(c).unwrap_or("");
            cell.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| {
                    Error::data(format!(
                        "non-numeric cell {cell:?} at data row {line}, column `{}`",
                        headers[c]
                    ))
                })
        };
        for &c in &var_cols {
            values.push(parse(c)?);
        }
        let y = parse(outcome_idx)?;
        if y != 0.0 && y != 1.0 {
            return Err(Error::data(format!(
                "outcome `{outcome_column}` is not binary: value {y} at data row {line}"
            )));
        }
        y0.push(y);
        sample_ids.push(match id_idx {
            Some(c) => record.get(c).unwrap_or("").to_string(),
            None => format!("s{row_no}"),
        });
    }
    let n = y0.len();
    let x = DMatrix::from_row_slice(n, var_cols.len(), &values);
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());
    Level0Dataset::new(id, x, y0, variable_names, sample_ids)
}

/// Writes a dataset in the same CSV layout `load_level0_csv` reads.
pub fn write_level0_csv(
    ds: &Level0Dataset,
    path: impl AsRef<Path>,
    outcome_column: &str,
    header_comment: Option<&str>,
) -> Result<()> {
    use std::io::Write;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    if let Some(comment) = header_comment {
        writeln!(file, "# {comment}")?;
    }
    let mut writer = csv::Writer::from_writer(file);
    let mut header = vec![SAMPLE_ID_COLUMN.to_string()];
    header.extend(ds.variable_names().iter().cloned());
    header.push(outcome_column.to_string());
    writer.write_record(&header)?;
    let mut row = Vec::with_capacity(header.len());
    for i in 0..ds.n_samples() {
        row.clear();
        row.push(ds.sample_ids()[i].clone());
        row.extend((0..ds.n_variables()).map(|v| format_number(ds.x()[(i, v)])));
        row.push(format_number(ds.y0()[i]));
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}

/// Shortest round-tripping representation; integers print without a fraction.
pub(crate) fn format_number(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

/// Known causes `Y¹` over the variables of a level-1 dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct KnownCauseLabels {
    labels: Vec<bool>,
    masked_fraction: Option<f64>,
}

impl KnownCauseLabels {
    pub fn new(labels: Vec<bool>, masked_fraction: Option<f64>) -> Result<Self> {
        if !labels.iter().any(|&l| l) {
            return Err(Error::data("known-cause labels contain no positive"));
        }
        if let Some(f) = masked_fraction {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::config(format!("masked fraction {f} outside [0, 1]")));
            }
        }
        Ok(KnownCauseLabels {
            labels,
            masked_fraction,
        })
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn masked_fraction(&self) -> Option<f64> {
        self.masked_fraction
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_positive(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }
}

/// Reveals `ceil(proportion * #causes)` of the true causes, chosen uniformly.
pub fn mask_known_causes(truth: &[bool], proportion: f64, seed: u64) -> Result<KnownCauseLabels> {
    if !(proportion > 0.0 && proportion <= 1.0) {
        return Err(Error::config(format!("masking proportion {proportion} outside (0, 1]")));
    }
    let positives: Vec<usize> = truth
        .iter()
        .enumerate()
        .filter(|(_, &t)| t)
        .map(|(i, _)| i)
        .collect();
    if positives.is_empty() {
        return Err(Error::data("truth vector has no causes to reveal"));
    }
    let n_reveal = ceil_fraction(proportion, positives.len());
    if n_reveal == 0 {
        return Err(Error::config(format!(
            "proportion {proportion} reveals zero of {} causes",
            positives.len()
        )));
    }
    let mut rng = util::rng(seed);
    let chosen = rand::seq::index::sample(&mut rng, positives.len(), n_reveal);
    let mut labels = vec![false; truth.len()];
    for k in chosen.iter() {
        labels[positives[k]] = true;
    }
    KnownCauseLabels::new(labels, Some(proportion))
}

/// Disjoint train/test sample indices over `0..J`.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub train_fraction: f64,
}

pub const DEFAULT_TRAIN_FRACTION: f64 = 0.67;

/// Outcome-stratified sample split, deterministic given `seed`.
pub fn split_samples(ds: &Level0Dataset, train_fraction: f64, seed: u64) -> Result<ColumnSplit> {
    let classes: Vec<bool> = ds.y0().iter().map(|&y| y == 1.0).collect();
    let (train, test) = stratified_split(&classes, train_fraction, seed)?;
    Ok(ColumnSplit {
        train,
        test,
        train_fraction,
    })
}

/// Splits indices `0..n` so each class keeps (almost exactly) its share in
/// both parts. The train size is `round(fraction * n)`, distributed over the
/// classes by largest remainder; every class gets at least one index per part.
pub fn stratified_split(classes: &[bool], train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::config(format!("train fraction {train_fraction} outside (0, 1)")));
    }
    let mut groups: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, &c) in classes.iter().enumerate() {
        groups[c as usize].push(i);
    }
    for (label, g) in groups.iter().enumerate() {
        if g.len() < 2 {
            return Err(Error::data(format!(
                "class {label} has {} member(s); stratified split needs at least 2",
                g.len()
            )));
        }
    }
    let n = classes.len();
    let total = ((train_fraction * n as f64).round() as usize).clamp(2, n - 2);
    let ideal: Vec<f64> = groups
        .iter()
        .map(|g| train_fraction * g.len() as f64)
        .collect();
    let mut take: Vec<usize> = ideal.iter().map(|v| v.floor() as usize).collect();
    let mut order = [0usize, 1];
    order.sort_by(|&a, &b| (ideal[b] - ideal[b].floor()).total_cmp(&(ideal[a] - ideal[a].floor())));
    let mut k = 0;
    while take.iter().sum::<usize>() < total {
        take[order[k % 2]] += 1;
        k += 1;
    }
    while take.iter().sum::<usize>() > total {
        let c = order[1 - k % 2];
        take[c] = take[c].saturating_sub(1);
        k += 1;
    }
    for (c, g) in groups.iter().enumerate() {
        take[c] = take[c].clamp(1, g.len() - 1);
    }

    let mut rng = util::rng(seed);
    let mut train = Vec::with_capacity(total);
    let mut test = Vec::with_capacity(n - total);
    for (c, g) in groups.iter_mut().enumerate() {
        g.shuffle(&mut rng);
        train.extend_from_slice(&g[..take[c]]);
        test.extend_from_slice(&g[take[c]..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::Builder::new().suffix(".csv").tempfile().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    fn toy(j: usize, v: usize, positives: usize) -> Level0Dataset {
        let x = DMatrix::from_fn(j, v, |i, c| ((i * 7 + c * 3) % 5) as f64);
        let y0 = (0..j).map(|i| (i < positives) as u8 as f64).collect();
        let names = (0..v).map(|c| format!("v{c}")).collect();
        Level0Dataset::from_parts("toy", x, y0, names).unwrap()
    }

    #[test]
    fn loads_small_csv() {
        let f = write_tmp("a,b,y\n1.5,2,0\n3,4,1\n5,6.25,1\n");
        let ds = load_level0_csv(f.path(), "y").unwrap();
        assert_eq!(ds.n_samples(), 3);
        assert_eq!(ds.n_variables(), 2);
        assert_eq!(ds.y0(), &[0.0, 1.0, 1.0]);
        assert_eq!(ds.variable_names(), &["a".to_string(), "b".to_string()]);
        assert_eq!(ds.x()[(2, 1)], 6.25);
    }

    #[test]
    fn outcome_column_may_sit_anywhere_and_ids_are_kept() {
        let f = write_tmp("# generated\nsample_id,y,g1,g2\np1,0,1,2\np2,1,3,4\n");
        let ds = load_level0_csv(f.path(), "y").unwrap();
        assert_eq!(ds.variable_names(), &["g1".to_string(), "g2".to_string()]);
        assert_eq!(ds.sample_ids(), &["p1".to_string(), "p2".to_string()]);
        assert_eq!(ds.x()[(1, 0)], 3.0);
    }

    #[test]
    fn na_cell_is_reported_with_location() {
        let f = write_tmp("a,b,y\n1,2,0\n3,NA,1\n");
        let err = load_level0_csv(f.path(), "y").unwrap_err().to_string();
        assert!(err.contains("row 2"), "{err}");
        assert!(err.contains("`b`"), "{err}");
    }

    #[test]
    fn single_class_outcome_is_rejected() {
        let f = write_tmp("a,y\n1,0\n2,0\n3,0\n");
        let err = load_level0_csv(f.path(), "y").unwrap_err().to_string();
        assert!(err.contains("single-class outcome"), "{err}");
    }

    #[test]
    fn non_binary_outcome_and_duplicates_are_rejected() {
        let f = write_tmp("a,y\n1,0\n2,2\n");
        assert!(load_level0_csv(f.path(), "y").is_err());
        let f = write_tmp("a,a,y\n1,1,0\n2,2,1\n");
        let err = load_level0_csv(f.path(), "y").unwrap_err().to_string();
        assert!(err.contains("duplicate"), "{err}");
        assert!(load_level0_csv("/nonexistent/file.csv", "y").is_err());
    }

    #[test]
    fn csv_round_trip() {
        let ds = toy(6, 3, 2);
        let f = tempfile::Builder::new().suffix(".csv").tempfile().unwrap();
        write_level0_csv(&ds, f.path(), "outcome", Some("hash=abc")).unwrap();
        let back = load_level0_csv(f.path(), "outcome").unwrap();
        assert_eq!(back.x(), ds.x());
        assert_eq!(back.y0(), ds.y0());
        assert_eq!(back.sample_ids(), ds.sample_ids());
    }

    #[test]
    fn split_100_at_067() {
        let ds = toy(100, 2, 30);
        let split = split_samples(&ds, 0.67, 7).unwrap();
        assert_eq!(split.train.len(), 67);
        assert_eq!(split.test.len(), 33);
        let train_pos = split.train.iter().filter(|&&i| ds.y0()[i] == 1.0).count() as f64;
        assert!((train_pos - 0.30 * 67.0).abs() <= 1.0, "train positives {train_pos}");
        assert_eq!(split, split_samples(&ds, 0.67, 7).unwrap());
        assert!(split_samples(&ds, 0.0, 7).is_err());
        assert!(split_samples(&ds, 1.0, 7).is_err());
    }

    #[test]
    fn split_needs_two_per_class() {
        let ds = toy(10, 2, 1);
        assert!(split_samples(&ds, 0.5, 1).is_err());
    }

    #[test]
    fn masking_reveals_exact_count_within_truth() {
        let truth: Vec<bool> = (0..1000).map(|i| i % 10 == 3).collect();
        let labels = mask_known_causes(&truth, 0.4, 11).unwrap();
        assert_eq!(labels.n_positive(), 40);
        assert!(labels.labels().iter().zip(&truth).all(|(&l, &t)| !l || t));
        let full = mask_known_causes(&truth, 1.0, 11).unwrap();
        assert_eq!(full.labels(), truth.as_slice());
        assert!(mask_known_causes(&truth, 0.0, 1).is_err());
        assert!(mask_known_causes(&[false; 5], 0.5, 1).is_err());
    }

    #[test]
    fn masking_selection_frequency_is_uniform() {
        // 10 causes, one revealed per draw; each should be picked ~Binomial(1000, 0.1).
        let truth: Vec<bool> = (0..50).map(|i| i % 5 == 0).collect();
        let mut counts = vec![0usize; 50];
        for seed in 0..1000 {
            let l = mask_known_causes(&truth, 0.1, seed).unwrap();
            for (i, &b) in l.labels().iter().enumerate() {
                counts[i] += b as usize;
            }
        }
        let sd = (1000.0f64 * 0.1 * 0.9).sqrt();
        for (i, &c) in counts.iter().enumerate() {
            if truth[i] {
                assert!((c as f64 - 100.0).abs() < 4.0 * sd, "cause {i} picked {c} times");
            } else {
                assert_eq!(c, 0);
            }
        }
    }

    #[test]
    fn transpose_round_trip() {
        let ds = toy(4, 3, 2);
        let view = ds.matrix_view();
        let t = ds.transposed();
        assert_eq!(t.values.nrows(), 3);
        assert_eq!(t.row_names, ds.variable_names());
        assert_eq!(t.transpose(), view);
    }
}
