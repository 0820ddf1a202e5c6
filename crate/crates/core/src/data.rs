//! Datasets: synthetic generators, CSV ingestion, splits and standardization.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Regression,
    Classification,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Regression => "regression",
            Task::Classification => "classification",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "regression" => Ok(Task::Regression),
            "classification" => Ok(Task::Classification),
            _ => Err(Error::InvalidConfig(format!("unknown task {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// N × O real targets.
    Regression(DenseMatrix),
    Classification { labels: Vec<usize>, n_classes: usize },
}

/// Per-column affine standardization `(v − mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Column statistics of `m`; constant columns get `std = 1`.
    pub fn fit(m: &DenseMatrix) -> Result<Self> {
        let n = m.rows();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        let c = m.cols();
        let mut mean = vec![0.0; c];
        for i in 0..n {
            for (acc, v) in mean.iter_mut().zip(m.row(i)) {
                *acc += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= n as f64);
        let mut var = vec![0.0; c];
        for i in 0..n {
            for ((acc, v), mu) in var.iter_mut().zip(m.row(i)).zip(&mean) {
                *acc += (v - mu) * (v - mu);
            }
        }
        let std = var
            .iter()
            .map(|v| {
                let s = (v / n as f64).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn identity(cols: usize) -> Self {
        Self {
            mean: vec![0.0; cols],
            std: vec![1.0; cols],
        }
    }

    pub fn transform(&self, m: &DenseMatrix) -> DenseMatrix {
        let mut out = m.clone();
        for i in 0..out.rows() {
            for ((v, mu), s) in out.row_mut(i).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - mu) / s;
            }
        }
        out
    }

    pub fn inverse_transform(&self, m: &DenseMatrix) -> DenseMatrix {
        let mut out = m.clone();
        for i in 0..out.rows() {
            for ((v, mu), s) in out.row_mut(i).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = *v * s + mu;
            }
        }
        out
    }
}

/// Standardization fitted on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub inputs: Standardizer,
    /// Regression only.
    pub targets: Option<Standardizer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: DenseMatrix,
    pub targets: Targets,
    pub feature_names: Option<Vec<String>>,
    /// Set once the dataset has been standardized.
    pub normalization: Option<Normalization>,
}

impl Dataset {
    pub fn regression(inputs: DenseMatrix, targets: DenseMatrix) -> Result<Self> {
        if inputs.rows() != targets.rows() {
            return Err(Error::dim("regression targets", inputs.rows(), targets.rows()));
        }
        let ds = Self {
            inputs,
            targets: Targets::Regression(targets),
            feature_names: None,
            normalization: None,
        };
        ds.check_finite()?;
        Ok(ds)
    }

    pub fn classification(inputs: DenseMatrix, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::dim("class labels", inputs.rows(), labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::InvalidConfig(format!(
                "label {bad} out of range for {n_classes} classes"
            )));
        }
        let ds = Self {
            inputs,
            targets: Targets::Classification { labels, n_classes },
            feature_names: None,
            normalization: None,
        };
        ds.check_finite()?;
        Ok(ds)
    }

    fn check_finite(&self) -> Result<()> {
        let targets_ok = match &self.targets {
            Targets::Regression(t) => t.is_finite(),
            Targets::Classification { .. } => true,
        };
        if !self.inputs.is_finite() || !targets_ok {
            return Err(Error::InvalidConfig("dataset contains non-finite values".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    /// Regression output dimension or number of classes.
    pub fn output_dim(&self) -> usize {
        match &self.targets {
            Targets::Regression(t) => t.cols(),
            Targets::Classification { n_classes, .. } => *n_classes,
        }
    }

    pub fn task(&self) -> Task {
        match self.targets {
            Targets::Regression(_) => Task::Regression,
            Targets::Classification { .. } => Task::Classification,
        }
    }

    pub fn input(&self, i: usize) -> &[f64] {
        self.inputs.row(i)
    }

    pub fn regression_targets(&self) -> Result<&DenseMatrix> {
        match &self.targets {
            Targets::Regression(t) => Ok(t),
            Targets::Classification { .. } => Err(Error::TaskMismatch {
                expected: "regression",
            }),
        }
    }

    pub fn labels(&self) -> Result<&[usize]> {
        match &self.targets {
            Targets::Classification { labels, .. } => Ok(labels),
            Targets::Regression(_) => Err(Error::TaskMismatch {
                expected: "classification",
            }),
        }
    }

    /// Rows `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let c = self.inputs.cols();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(self.inputs.row(i));
        }
        let inputs = DenseMatrix::from_vec(indices.len(), c, data).expect("consistent shape");
        let targets = match &self.targets {
            Targets::Regression(t) => {
                let o = t.cols();
                let mut d = Vec::with_capacity(indices.len() * o);
                for &i in indices {
                    d.extend_from_slice(t.row(i));
                }
                Targets::Regression(DenseMatrix::from_vec(indices.len(), o, d).expect("shape"))
            }
            Targets::Classification { labels, n_classes } => Targets::Classification {
                labels: indices.iter().map(|&i| labels[i]).collect(),
                n_classes: *n_classes,
            },
        };
        Dataset {
            inputs,
            targets,
            feature_names: self.feature_names.clone(),
            normalization: self.normalization.clone(),
        }
    }

    /// Standardization statistics of this (training) dataset.
    pub fn fit_normalization(&self) -> Result<Normalization> {
        Ok(Normalization {
            inputs: Standardizer::fit(&self.inputs)?,
            targets: match &self.targets {
                Targets::Regression(t) => Some(Standardizer::fit(t)?),
                Targets::Classification { .. } => None,
            },
        })
    }

    /// Applies `norm` to raw data.
    pub fn standardized(&self, norm: &Normalization) -> Result<Dataset> {
        if self.normalization.is_some() {
            return Err(Error::InvalidConfig("dataset is already standardized".into()));
        }
        if norm.inputs.mean.len() != self.input_dim() {
            return Err(Error::dim("normalization", self.input_dim(), norm.inputs.mean.len()));
        }
        let targets = match (&self.targets, &norm.targets) {
            (Targets::Regression(t), Some(s)) => Targets::Regression(s.transform(t)),
            (Targets::Regression(t), None) => Targets::Regression(t.clone()),
            (c @ Targets::Classification { .. }, _) => c.clone(),
        };
        Ok(Dataset {
            inputs: norm.inputs.transform(&self.inputs),
            targets,
            feature_names: self.feature_names.clone(),
            normalization: Some(norm.clone()),
        })
    }

    /// Undoes standardization.
    pub fn destandardized(&self) -> Dataset {
        let Some(norm) = &self.normalization else {
            return self.clone();
        };
        let targets = match (&self.targets, &norm.targets) {
            (Targets::Regression(t), Some(s)) => Targets::Regression(s.inverse_transform(t)),
            (t, _) => t.clone(),
        };
        Dataset {
            inputs: norm.inputs.inverse_transform(&self.inputs),
            targets,
            feature_names: self.feature_names.clone(),
            normalization: None,
        }
    }
}

/// Input range that separates the two toy clusters.
pub const TOY_GAP: (f64, f64) = (-0.75, 0.75);
/// Cluster supports of the toy dataset.
pub const TOY_CLUSTERS: [(f64, f64); 2] = [(-2.0, -0.75), (0.75, 2.0)];

/// Generating function of the toy regression data.
pub fn toy_function(x: f64) -> f64 {
    (2.5 * x).sin() + 0.3 * x
}

/// One-dimensional regression data with two input clusters,
/// `x ∈ [-2, -0.75] ∪ [0.75, 2]`, separated by an unobserved gap, with
/// targets `sin(2.5x) + 0.3x + ε`, `ε ~ N(0, noise_std²)`.
pub fn make_toy_1d(n_per_cluster: usize, noise_std: f64, seed: u64) -> Result<Dataset> {
    if n_per_cluster == 0 {
        return Err(Error::InvalidSize("toy dataset needs at least one point per cluster".into()));
    }
    let mut rng = rng::stream(seed, "data/toy1d");
    let mut xs = Vec::with_capacity(2 * n_per_cluster);
    for (lo, hi) in TOY_CLUSTERS {
        for _ in 0..n_per_cluster {
            xs.push(rng.random_range(lo..hi));
        }
    }
    let ys: Vec<f64> = xs
        .iter()
        .map(|&x| {
            let eps: f64 = rng.sample(StandardNormal);
            toy_function(x) + noise_std * eps
        })
        .collect();
    Dataset::regression(DenseMatrix::column(&xs), DenseMatrix::column(&ys))
}

/// Two interleaving half circles, labels 0 and 1, with isotropic Gaussian
/// input noise.
pub fn make_two_moons(n: usize, noise_std: f64, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::InvalidSize("two-moons needs at least two points".into()));
    }
    let mut rng = rng::stream(seed, "data/two-moons");
    let normal = Normal::new(0.0, noise_std.max(0.0)).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let n_outer = n / 2;
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let (x, y, label) = if i < n_outer {
            let t = std::f64::consts::PI * i as f64 / (n_outer.max(2) - 1) as f64;
            (t.cos(), t.sin(), 0)
        } else {
            let k = i - n_outer;
            let m = n - n_outer;
            let t = std::f64::consts::PI * k as f64 / (m.max(2) - 1) as f64;
            (1.0 - t.cos(), 0.5 - t.sin(), 1)
        };
        rows.push(vec![x + normal.sample(&mut rng), y + normal.sample(&mut rng)]);
        labels.push(label);
    }
    Dataset::classification(DenseMatrix::from_rows(&rows)?, labels, 2)
}

/// Synthetic tabular regression data of configurable shape: correlated
/// features generated from a low-dimensional latent factor, and a target
/// mixing linear, interaction and saturating terms plus Gaussian noise.
pub fn make_synthetic_tabular(n: usize, input_dim: usize, noise_std: f64, seed: u64) -> Result<Dataset> {
    if n == 0 || input_dim == 0 {
        return Err(Error::InvalidSize("synthetic tabular data needs n ≥ 1 and input_dim ≥ 1".into()));
    }
    let mut rng = rng::stream(seed, "data/tabular");
    let latent = 3;
    let loadings: Vec<f64> = (0..input_dim * latent)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let coef: Vec<f64> = (0..input_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut rows = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let z: Vec<f64> = (0..latent).map(|_| rng.sample(StandardNormal)).collect();
        let x: Vec<f64> = (0..input_dim)
            .map(|j| {
                let shared: f64 = (0..latent).map(|k| loadings[j * latent + k] * z[k]).sum();
                let own: f64 = rng.sample(StandardNormal);
                0.6 * shared + 0.8 * own
            })
            .collect();
        let linear: f64 = x.iter().zip(&coef).map(|(a, b)| a * b).sum::<f64>() / (input_dim as f64).sqrt();
        let x1 = x.get(1).copied().unwrap_or(0.0);
        let x2 = x.get(2).copied().unwrap_or(0.0);
        let signal = linear + 0.5 * (x[0] * x1).tanh() + 0.4 * (1.5 * x2).sin();
        let eps: f64 = rng.sample(StandardNormal);
        ys.push(signal + noise_std * eps);
        rows.push(x);
    }
    let mut ds = Dataset::regression(DenseMatrix::from_rows(&rows)?, DenseMatrix::column(&ys))?;
    ds.feature_names = Some((0..input_dim).map(|j| format!("x{j}")).collect());
    Ok(ds)
}

/// Published shape of a tabular benchmark dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TabularInfo {
    pub name: &'static str,
    pub input_dim: usize,
    pub n_points: usize,
    pub standard_splits: usize,
}

impl TabularInfo {
    /// One gap split per input dimension.
    pub fn gap_splits(&self) -> usize {
        self.input_dim
    }
}

pub const TABULAR_DATASETS: [TabularInfo; 3] = [
    TabularInfo {
        name: "wine",
        input_dim: 11,
        n_points: 1439,
        standard_splits: 20,
    },
    TabularInfo {
        name: "kin8nm",
        input_dim: 8,
        n_points: 7373,
        standard_splits: 20,
    },
    TabularInfo {
        name: "protein",
        input_dim: 9,
        n_points: 41157,
        standard_splits: 5,
    },
];

pub fn tabular_info(name: &str) -> Option<TabularInfo> {
    TABULAR_DATASETS.iter().copied().find(|t| t.name == name)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Standard,
    Gap,
}

/// Fraction of training data held out for validation.
pub const DEFAULT_VAL_FRACTION: f64 = 0.15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub kind: SplitKind,
    pub train_frac: f64,
    pub val_frac_of_train: f64,
    pub gap_dimension: usize,
    pub seed: u64,
}

impl SplitSpec {
    pub fn standard(seed: u64) -> Self {
        Self {
            kind: SplitKind::Standard,
            train_frac: 0.9,
            val_frac_of_train: DEFAULT_VAL_FRACTION,
            gap_dimension: 0,
            seed,
        }
    }

    pub fn gap(dimension: usize, seed: u64) -> Self {
        Self {
            kind: SplitKind::Gap,
            train_frac: 2.0 / 3.0,
            val_frac_of_train: DEFAULT_VAL_FRACTION,
            gap_dimension: dimension,
            seed,
        }
    }

    fn validate(&self, input_dim: usize) -> Result<()> {
        let ok = |f: f64| f > 0.0 && f < 1.0;
        if !ok(self.train_frac) || !ok(self.val_frac_of_train) {
            return Err(Error::InvalidConfig(format!(
                "split fractions must lie in (0, 1): {self:?}"
            )));
        }
        if self.kind == SplitKind::Gap && self.gap_dimension >= input_dim {
            return Err(Error::InvalidConfig(format!(
                "gap dimension {} out of range for {input_dim} inputs",
                self.gap_dimension
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Validation size out of `n` training points: `ceil(frac·n)`, with a small
/// guard so products like `0.15 · 100` are not bumped up by rounding error.
pub fn validation_count(n: usize, frac: f64) -> usize {
    ((n as f64 * frac) - 1e-9).ceil().max(0.0) as usize
}

fn carve_validation(data: &Dataset, mut pool: Vec<usize>, frac: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let n_val = validation_count(pool.len(), frac);
    if n_val == 0 || n_val >= pool.len() {
        return Err(Error::TooFewPoints { have: pool.len() });
    }
    pool.shuffle(&mut rng::stream(seed, "split/validation"));
    let (val, train) = pool.split_at(n_val);
    Ok((data.subset(train), data.subset(val)))
}

/// Seeded shuffle, then `floor(N·(1 − train_frac))` test points; the
/// remainder is training data with `ceil(val_frac·n)` of it held out for
/// validation.
pub fn split_standard(data: &Dataset, spec: &SplitSpec) -> Result<Split> {
    spec.validate(data.input_dim())?;
    let n = data.len();
    let n_test = (n as f64 * (1.0 - spec.train_frac) + 1e-9).floor() as usize;
    if n_test == 0 || n_test >= n {
        return Err(Error::TooFewPoints { have: n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(spec.seed, "split/standard"));
    let (test_idx, rest) = order.split_at(n_test);
    let (train, val) = carve_validation(data, rest.to_vec(), spec.val_frac_of_train, spec.seed)?;
    Ok(Split {
        train,
        val,
        test: data.subset(test_idx),
    })
}

/// Orders points by input `dim` and holds out the middle third as test data.
pub fn split_gap(data: &Dataset, spec: &SplitSpec) -> Result<Split> {
    spec.validate(data.input_dim())?;
    let n = data.len();
    let n_test = n / 3;
    if n_test == 0 {
        return Err(Error::TooFewPoints { have: n });
    }
    let dim = spec.gap_dimension;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| data.inputs[(a, dim)].total_cmp(&data.inputs[(b, dim)]).then(a.cmp(&b)));
    let lower = (n - n_test) / 2;
    let test_idx = &order[lower..lower + n_test];
    let mut pool = order[..lower].to_vec();
    pool.extend_from_slice(&order[lower + n_test..]);
    let (train, val) = carve_validation(data, pool, spec.val_frac_of_train, spec.seed)?;
    Ok(Split {
        train,
        val,
        test: data.subset(test_idx),
    })
}

pub fn split(data: &Dataset, spec: &SplitSpec) -> Result<Split> {
    match spec.kind {
        SplitKind::Standard => split_standard(data, spec),
        SplitKind::Gap => split_gap(data, spec),
    }
}

/// Which CSV columns are targets, and how to read them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub target_columns: Vec<String>,
    pub task: Task,
}

/// Dataset manifest document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub path: PathBuf,
    pub target_columns: Vec<String>,
    pub task: Task,
}

impl DatasetManifest {
    pub fn schema(&self) -> CsvSchema {
        CsvSchema {
            target_columns: self.target_columns.clone(),
            task: self.task,
        }
    }
}

/// Reads a numeric CSV with a header row. Every non-target column is an input.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, schema)
}

pub fn read_csv<R: std::io::Read>(reader: R, schema: &CsvSchema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Parse {
            row: 0,
            column: String::new(),
            message: e.to_string(),
        })?
        .iter()
        .map(str::to_owned)
        .collect();
    let mut target_pos = Vec::new();
    for t in &schema.target_columns {
        let p = headers
            .iter()
            .position(|h| h == t)
            .ok_or_else(|| Error::MissingColumn(t.clone()))?;
        target_pos.push(p);
    }
    if target_pos.is_empty() {
        return Err(Error::InvalidConfig("at least one target column is required".into()));
    }
    if schema.task == Task::Classification && target_pos.len() != 1 {
        return Err(Error::InvalidConfig("classification takes exactly one label column".into()));
    }
    let input_pos: Vec<usize> = (0..headers.len()).filter(|p| !target_pos.contains(p)).collect();
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let row = r + 1;
        let rec = rec.map_err(|e| Error::Parse {
            row,
            column: String::new(),
            message: e.to_string(),
        })?;
        let cell = |p: usize| -> Result<f64> {
            let raw = rec.get(p).unwrap_or("");
            let v: f64 = raw.parse().map_err(|_| Error::Parse {
                row,
                column: headers[p].clone(),
                message: format!("not a number: {raw:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    column: headers[p].clone(),
                    message: format!("non-finite value {raw:?}"),
                });
            }
            Ok(v)
        };
        let x = input_pos.iter().map(|&p| cell(p)).collect::<Result<Vec<_>>>()?;
        let y = target_pos.iter().map(|&p| cell(p)).collect::<Result<Vec<_>>>()?;
        inputs.push(x);
        targets.push(y);
    }
    if inputs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let input_names: Vec<String> = input_pos.iter().map(|&p| headers[p].clone()).collect();
    let inputs = DenseMatrix::from_vec(inputs.len(), input_pos.len(), inputs.concat())?;
    let mut ds = match schema.task {
        Task::Regression => {
            let t = DenseMatrix::from_vec(targets.len(), target_pos.len(), targets.concat())?;
            Dataset::regression(inputs, t)?
        }
        Task::Classification => {
            let mut labels = Vec::with_capacity(targets.len());
            for (r, t) in targets.iter().enumerate() {
                let v = t[0];
                if v < 0.0 || v.fract() != 0.0 {
                    return Err(Error::Parse {
                        row: r + 1,
                        column: schema.target_columns[0].clone(),
                        message: format!("class label must be a non-negative integer, got {v}"),
                    });
                }
                labels.push(v as usize);
            }
            let n_classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
            Dataset::classification(inputs, labels, n_classes)?
        }
    };
    ds.feature_names = Some(input_names);
    Ok(ds)
}

/// Writes inputs then targets with a header row. Values use the shortest
/// representation that parses back to the same `f64`.
pub fn write_csv<W: std::io::Write>(data: &Dataset, target_names: &[String], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let names: Vec<String> = data
        .feature_names
        .clone()
        .unwrap_or_else(|| (0..data.input_dim()).map(|j| format!("x{j}")).collect());
    let mut header = names;
    header.extend_from_slice(target_names);
    let csv_err = |e: csv::Error| Error::InvalidConfig(format!("csv write failed: {e}"));
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..data.len() {
        let mut rec: Vec<String> = data.input(i).iter().map(|v| v.to_string()).collect();
        match &data.targets {
            Targets::Regression(t) => rec.extend(t.row(i).iter().map(|v| v.to_string())),
            Targets::Classification { labels, .. } => rec.push(labels[i].to_string()),
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(n: usize) -> Dataset {
        let xs: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64, (n - i) as f64 * 0.5]).collect();
        let ys: Vec<f64> = (0..n).map(|i| 2.0 * i as f64).collect();
        Dataset::regression(DenseMatrix::from_rows(&xs).unwrap(), DenseMatrix::column(&ys)).unwrap()
    }

    #[test]
    fn toy_noiseless_lies_on_function() {
        let ds = make_toy_1d(20, 0.0, 3).unwrap();
        let t = ds.regression_targets().unwrap();
        for i in 0..ds.len() {
            assert_eq!(t[(i, 0)], toy_function(ds.input(i)[0]));
        }
    }

    #[test]
    fn toy_is_seeded_and_clusters_disjoint() {
        assert_eq!(make_toy_1d(30, 0.1, 1).unwrap(), make_toy_1d(30, 0.1, 1).unwrap());
        assert_ne!(make_toy_1d(30, 0.1, 1).unwrap(), make_toy_1d(30, 0.1, 2).unwrap());
        let ds = make_toy_1d(50, 0.1, 4).unwrap();
        let xs: Vec<f64> = (0..ds.len()).map(|i| ds.input(i)[0]).collect();
        let max1 = xs[..50].iter().copied().fold(f64::MIN, f64::max);
        let min2 = xs[50..].iter().copied().fold(f64::MAX, f64::min);
        assert!(max1 < min2);
        assert!(max1 <= TOY_GAP.0 && min2 >= TOY_GAP.1);
        assert!(make_toy_1d(0, 0.1, 0).is_err());
    }

    #[test]
    fn two_moons_shape() {
        let ds = make_two_moons(100, 0.1, 0).unwrap();
        assert_eq!(ds.len(), 100);
        assert_eq!(ds.output_dim(), 2);
        assert_eq!(ds.labels().unwrap().iter().filter(|&&l| l == 1).count(), 50);
    }

    #[test]
    fn standard_split_sizes() {
        let ds = ramp(100);
        let s = split_standard(&ds, &SplitSpec::standard(0)).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (76, 14, 10));
        assert_eq!(SplitSpec::standard(0).val_frac_of_train, 0.15);
        // Recompute the rounding rule independently: floor for test,
        // ceil for validation.
        for n in [20usize, 37, 100, 1439, 1599] {
            let s = split_standard(&ramp(n), &SplitSpec::standard(1)).unwrap();
            let test = n / 10;
            let val = (15 * (n - test)).div_ceil(100);
            assert_eq!(s.test.len(), test, "n={n}");
            assert_eq!(s.val.len(), val, "n={n}");
            assert_eq!(s.train.len(), n - test - val);
        }
    }

    #[test]
    fn standard_split_seed_changes_partition() {
        let ds = ramp(100);
        let a = split_standard(&ds, &SplitSpec::standard(0)).unwrap();
        let b = split_standard(&ds, &SplitSpec::standard(1)).unwrap();
        assert_eq!(a.test.len(), b.test.len());
        assert_ne!(a.test, b.test);
        assert_eq!(a, split_standard(&ds, &SplitSpec::standard(0)).unwrap());
    }

    #[test]
    fn split_rejects_tiny_and_bad_specs() {
        assert!(matches!(
            split_standard(&ramp(3), &SplitSpec::standard(0)),
            Err(Error::TooFewPoints { .. })
        ));
        let mut bad = SplitSpec::standard(0);
        bad.train_frac = 1.0;
        assert!(split_standard(&ramp(50), &bad).is_err());
        assert!(split_gap(&ramp(50), &SplitSpec::gap(2, 0)).is_err());
    }

    #[test]
    fn gap_split_holds_out_middle_third() {
        let ds = ramp(90);
        let s = split_gap(&ds, &SplitSpec::gap(0, 0)).unwrap();
        let mut test: Vec<f64> = (0..s.test.len()).map(|i| s.test.input(i)[0]).collect();
        test.sort_by(f64::total_cmp);
        assert_eq!(test, (30..60).map(|i| i as f64).collect::<Vec<_>>());
        assert_eq!(s.train.len() + s.val.len() + s.test.len(), 90);
        // Dimension 1 is decreasing in i: same middle block.
        let s1 = split_gap(&ds, &SplitSpec::gap(1, 0)).unwrap();
        let mut t1: Vec<f64> = (0..s1.test.len()).map(|i| s1.test.input(i)[0]).collect();
        t1.sort_by(f64::total_cmp);
        assert_eq!(t1, test);
    }

    #[test]
    fn gap_split_is_a_partition() {
        let ds = make_synthetic_tabular(200, 4, 0.1, 0).unwrap();
        for d in 0..4 {
            let s = split_gap(&ds, &SplitSpec::gap(d, 5)).unwrap();
            let mut all: Vec<Vec<u64>> = [&s.train, &s.val, &s.test]
                .iter()
                .flat_map(|p| (0..p.len()).map(|i| p.input(i).iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect::<Vec<_>>())
                .collect();
            assert_eq!(all.len(), 200);
            all.sort();
            all.dedup();
            assert_eq!(all.len(), 200);
        }
    }

    #[test]
    fn published_split_counts() {
        assert_eq!(tabular_info("wine").unwrap().gap_splits(), 11);
        assert_eq!(tabular_info("kin8nm").unwrap().gap_splits(), 8);
        assert_eq!(tabular_info("protein").unwrap().gap_splits(), 9);
        assert_eq!(tabular_info("wine").unwrap().n_points, 1439);
        assert_eq!(tabular_info("protein").unwrap().n_points, 41157);
    }

    #[test]
    fn csv_load_small_file() {
        let text = "a,b,y\n1.0,2.0,3.5\n-1,0.25,7\n";
        let schema = CsvSchema {
            target_columns: vec!["y".into()],
            task: Task::Regression,
        };
        let ds = read_csv(text.as_bytes(), &schema).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.input(1), &[-1.0, 0.25]);
        assert_eq!(ds.regression_targets().unwrap().as_slice(), &[3.5, 7.0]);
        assert_eq!(ds.feature_names.as_deref(), Some(&["a".to_string(), "b".to_string()][..]));
    }

    #[test]
    fn csv_parse_error_names_cell() {
        let text = "a,y\n1.0,2\nfoo,3\n";
        let schema = CsvSchema {
            target_columns: vec!["y".into()],
            task: Task::Regression,
        };
        match read_csv(text.as_bytes(), &schema) {
            Err(Error::Parse { row, column, .. }) => {
                assert_eq!(row, 2);
                assert_eq!(column, "a");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
        let missing = CsvSchema {
            target_columns: vec!["z".into()],
            task: Task::Regression,
        };
        assert!(matches!(read_csv(text.as_bytes(), &missing), Err(Error::MissingColumn(_))));
    }

    #[test]
    fn csv_round_trip_is_lossless() {
        let ds = make_synthetic_tabular(25, 3, 0.3, 8).unwrap();
        let mut buf = Vec::new();
        write_csv(&ds, &["y".to_string()], &mut buf).unwrap();
        let schema = CsvSchema {
            target_columns: vec!["y".into()],
            task: Task::Regression,
        };
        let back = read_csv(buf.as_slice(), &schema).unwrap();
        assert_eq!(back.inputs, ds.inputs);
        assert_eq!(back.targets, ds.targets);
    }

    #[test]
    fn classification_csv() {
        let text = "x,label\n0.5,1\n0.1,0\n";
        let schema = CsvSchema {
            target_columns: vec!["label".into()],
            task: Task::Classification,
        };
        let ds = read_csv(text.as_bytes(), &schema).unwrap();
        assert_eq!(ds.labels().unwrap(), &[1, 0]);
        assert!(read_csv("x,label\n0.5,1.5\n".as_bytes(), &schema).is_err());
    }

    #[test]
    fn standardization_uses_train_stats_and_inverts() {
        let ds = make_synthetic_tabular(60, 3, 0.2, 2).unwrap();
        let s = split_standard(&ds, &SplitSpec::standard(0)).unwrap();
        let norm = s.train.fit_normalization().unwrap();
        let train = s.train.standardized(&norm).unwrap();
        let col_mean: f64 = (0..train.len()).map(|i| train.input(i)[0]).sum::<f64>() / train.len() as f64;
        assert!(col_mean.abs() < 1e-12);
        let test = s.test.standardized(&norm).unwrap();
        let back = test.destandardized();
        assert!(back.inputs.sub(&s.test.inputs).unwrap().max_abs() < 1e-12);
        assert!(back
            .regression_targets()
            .unwrap()
            .sub(s.test.regression_targets().unwrap())
            .unwrap()
            .max_abs()
            < 1e-12);
        assert!(train.standardized(&norm).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn standardize_round_trip(rows in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 3), 1..30)) {
                let m = DenseMatrix::from_rows(&rows).unwrap();
                let s = Standardizer::fit(&m).unwrap();
                let back = s.inverse_transform(&s.transform(&m));
                prop_assert!(back.sub(&m).unwrap().max_abs() <= 1e-12 * m.max_abs().max(1.0));
            }

            #[test]
            fn gap_test_lies_between_train_blocks(n in 12usize..80, dim in 0usize..3, seed in any::<u64>()) {
                let ds = make_synthetic_tabular(n, 3, 0.1, seed).unwrap();
                let s = split_gap(&ds, &SplitSpec::gap(dim, seed)).unwrap();
                let col = |d: &Dataset| (0..d.len()).map(|i| d.input(i)[dim]).collect::<Vec<_>>();
                let test = col(&s.test);
                let lo = test.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = test.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                for v in col(&s.train).into_iter().chain(col(&s.val)) {
                    prop_assert!(v <= lo || v >= hi);
                }
            }
        }
    }
}
