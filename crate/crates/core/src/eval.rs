//! Predictive metrics, λ grid search, and long-format result reports.

use std::f64::consts::PI;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Targets, Task};
use crate::error::{Error, Result};
use crate::linalg::pairwise_sum;
use crate::predict::{predict, Posterior, Prediction};
use crate::train::MapEstimate;

/// Prior precisions tried on the validation set.
pub const DEFAULT_LAMBDA_GRID: [f64; 10] = [0.0001, 0.001, 0.1, 0.5, 1.0, 2.0, 5.0, 10.0, 100.0, 1000.0];

/// Equal-width confidence bins used by [`ece`].
pub const DEFAULT_ECE_BINS: usize = 15;

/// Smallest probability used inside a logarithm.
pub const PROB_FLOOR: f64 = 1e-15;

fn target_log_scale(data: &Dataset) -> f64 {
    data.normalization
        .as_ref()
        .and_then(|n| n.targets.as_ref())
        .map_or(0.0, |s| s.std.iter().map(|v| v.ln()).sum())
}

fn target_scales(data: &Dataset) -> Vec<f64> {
    data.normalization
        .as_ref()
        .and_then(|n| n.targets.as_ref())
        .map_or_else(|| vec![1.0; data.output_dim()], |s| s.std.clone())
}

fn check_len(pred: &Prediction, data: &Dataset) -> Result<()> {
    if pred.len() != data.len() {
        return Err(Error::dim("predictions", data.len(), pred.len()));
    }
    if pred.task != data.task() {
        return Err(Error::TaskMismatch {
            expected: match pred.task {
                Task::Regression => "regression",
                Task::Classification => "classification",
            },
        });
    }
    Ok(())
}

/// Per-point log-density of each target under the predictive.
///
/// For standardized regression data the density is reported on the
/// original target scale (the Jacobian `−Σ ln std_k` is added), so numbers
/// are comparable with results computed on raw targets.
pub fn pointwise_log_likelihood(pred: &Prediction, data: &Dataset) -> Result<Vec<f64>> {
    check_len(pred, data)?;
    match &data.targets {
        Targets::Regression(t) => {
            let var = pred.total_variance();
            let shift = target_log_scale(data);
            Ok((0..data.len())
                .map(|i| {
                    let terms: Vec<f64> = t
                        .row(i)
                        .iter()
                        .zip(pred.mean.row(i))
                        .zip(var.row(i))
                        .map(|((y, m), v)| -0.5 * ((2.0 * PI * v).ln() + (y - m) * (y - m) / v))
                        .collect();
                    pairwise_sum(&terms) - shift
                })
                .collect())
        }
        Targets::Classification { labels, .. } => {
            let probs = pred
                .probabilities
                .as_ref()
                .ok_or(Error::TaskMismatch { expected: "classification" })?;
            Ok(labels
                .iter()
                .enumerate()
                .map(|(i, &y)| probs[(i, y)].max(PROB_FLOOR).ln())
                .collect())
        }
    }
}

/// Mean per-point log-likelihood.
pub fn log_likelihood(pred: &Prediction, data: &Dataset) -> Result<f64> {
    let ll = pointwise_log_likelihood(pred, data)?;
    if ll.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(pairwise_sum(&ll) / ll.len() as f64)
}

/// Root mean squared error on the original target scale.
pub fn rmse(pred: &Prediction, data: &Dataset) -> Result<f64> {
    check_len(pred, data)?;
    let t = data.regression_targets()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let scales = target_scales(data);
    let sq: Vec<f64> = (0..data.len())
        .flat_map(|i| {
            let scales = &scales;
            t.row(i)
                .iter()
                .zip(pred.mean.row(i))
                .zip(scales)
                .map(|((y, m), s)| ((y - m) * s).powi(2))
                .collect::<Vec<_>>()
        })
        .collect();
    Ok((pairwise_sum(&sq) / sq.len() as f64).sqrt())
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = k;
        }
    }
    best
}

fn check_probs(probs: &[Vec<f64>], labels: &[usize]) -> Result<()> {
    if probs.len() != labels.len() {
        return Err(Error::dim("probability rows", labels.len(), probs.len()));
    }
    if probs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(())
}

/// Fraction of points whose most probable class is wrong.
pub fn error_rate(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    check_probs(probs, labels)?;
    let wrong = probs.iter().zip(labels).filter(|(p, &y)| argmax(p) != y).count();
    Ok(wrong as f64 / labels.len() as f64)
}

/// Expected calibration error: `Σ_b (n_b/N)·|acc_b − conf_b|` over
/// equal-width bins of the top-class probability. Confidence 1 falls in the
/// last bin.
pub fn ece(probs: &[Vec<f64>], labels: &[usize], n_bins: usize) -> Result<f64> {
    check_probs(probs, labels)?;
    if n_bins == 0 {
        return Err(Error::InvalidConfig("ECE needs at least one bin".into()));
    }
    let mut count = vec![0usize; n_bins];
    let mut conf = vec![0.0; n_bins];
    let mut correct = vec![0.0; n_bins];
    for (p, &y) in probs.iter().zip(labels) {
        let k = argmax(p);
        let c = p[k];
        let b = ((c * n_bins as f64) as usize).min(n_bins - 1);
        count[b] += 1;
        conf[b] += c;
        if k == y {
            correct[b] += 1.0;
        }
    }
    let n = labels.len() as f64;
    let terms: Vec<f64> = (0..n_bins)
        .filter(|&b| count[b] > 0)
        .map(|b| (correct[b] - conf[b]).abs() / n)
        .collect();
    Ok(pairwise_sum(&terms))
}

/// Mean over points of `‖p − onehot(y)‖²`.
pub fn brier(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    check_probs(probs, labels)?;
    let per: Vec<f64> = probs
        .iter()
        .zip(labels)
        .map(|(p, &y)| {
            p.iter()
                .enumerate()
                .map(|(k, v)| {
                    let t = if k == y { 1.0 } else { 0.0 };
                    (v - t) * (v - t)
                })
                .sum()
        })
        .collect();
    Ok(pairwise_sum(&per) / per.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub log_likelihood: f64,
    /// RMSE for regression, error rate for classification.
    pub error: f64,
    pub ece: Option<f64>,
    pub brier: Option<f64>,
}

fn prob_rows(pred: &Prediction) -> Result<Vec<Vec<f64>>> {
    let p = pred
        .probabilities
        .as_ref()
        .ok_or(Error::TaskMismatch { expected: "classification" })?;
    Ok((0..p.rows()).map(|i| p.row(i).to_vec()).collect())
}

/// Every metric that applies to the prediction's task.
pub fn evaluate(pred: &Prediction, data: &Dataset) -> Result<Metrics> {
    let log_likelihood = log_likelihood(pred, data)?;
    match data.task() {
        Task::Regression => Ok(Metrics {
            log_likelihood,
            error: rmse(pred, data)?,
            ece: None,
            brier: None,
        }),
        Task::Classification => {
            let rows = prob_rows(pred)?;
            let labels = data.labels()?;
            Ok(Metrics {
                log_likelihood,
                error: error_rate(&rows, labels)?,
                ece: Some(ece(&rows, labels, DEFAULT_ECE_BINS)?),
                brier: Some(brier(&rows, labels)?),
            })
        }
    }
}

/// Validation log-likelihood of every grid value and the winner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSearch {
    pub best_lambda: f64,
    pub best_log_likelihood: f64,
    pub scores: Vec<(f64, f64)>,
}

/// Picks the prior precision with the highest validation log-likelihood.
///
/// `build` produces the posterior for a full-network λ (and is responsible
/// for any subnetwork rescaling). Ties go to the smaller λ; λ values whose
/// posterior fails to build or gives a non-finite score are skipped.
pub fn grid_search_lambda<F>(map: &MapEstimate, val: &Dataset, grid: &[f64], mut build: F) -> Result<LambdaSearch>
where
    F: FnMut(f64) -> Result<Posterior>,
{
    if val.is_empty() {
        return Err(Error::EmptyValidation);
    }
    if grid.is_empty() {
        return Err(Error::InvalidConfig("empty λ grid".into()));
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut scores = Vec::with_capacity(sorted.len());
    let mut best: Option<(f64, f64)> = None;
    let mut last_err = None;
    for &lambda in &sorted {
        let ll = match build(lambda).and_then(|post| predict(map, &post, &val.inputs)).and_then(|p| log_likelihood(&p, val)) {
            Ok(v) if v.is_finite() => v,
            Ok(_) => continue,
            Err(e) => {
                last_err = Some(e);
                continue;
            }
        };
        scores.push((lambda, ll));
        if best.is_none_or(|(_, b)| ll > b) {
            best = Some((lambda, ll));
        }
    }
    match best {
        Some((best_lambda, best_log_likelihood)) => Ok(LambdaSearch {
            best_lambda,
            best_log_likelihood,
            scores,
        }),
        None => Err(last_err.unwrap_or_else(|| Error::InvalidConfig("no λ gave a finite validation score".into()))),
    }
}

/// One long-format result row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub dataset: String,
    pub split: String,
    pub seed: u64,
    pub method: String,
    pub subnet_size: usize,
    pub lambda: f64,
    pub metric: String,
    pub value: f64,
}

impl ResultRow {
    /// Rows for each metric in `m`.
    pub fn from_metrics(dataset: &str, split: &str, seed: u64, method: &str, size: usize, lambda: f64, m: &Metrics) -> Vec<ResultRow> {
        let error_name = if m.ece.is_some() { "error" } else { "rmse" };
        let mut pairs = vec![("ll", m.log_likelihood), (error_name, m.error)];
        if let Some(v) = m.ece {
            pairs.push(("ece", v));
        }
        if let Some(v) = m.brier {
            pairs.push(("brier", v));
        }
        pairs
            .into_iter()
            .map(|(metric, value)| ResultRow {
                dataset: dataset.to_string(),
                split: split.to_string(),
                seed,
                method: method.to_string(),
                subnet_size: size,
                lambda,
                metric: metric.to_string(),
                value,
            })
            .collect()
    }
}

pub fn write_rows_csv<W: Write>(rows: &[ResultRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::InvalidConfig(format!("writing results: {e}")))?;
    }
    w.flush().map_err(|e| Error::io("results", e))
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

pub fn aggregate(values: &[f64]) -> Option<Aggregate> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = pairwise_sum(values) / n;
    let dev: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    Some(Aggregate {
        mean,
        std: (pairwise_sum(&dev) / n).sqrt(),
        n: values.len(),
    })
}

/// Summary entry: one (method, size, metric) aggregated over splits/seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryEntry {
    pub method: String,
    pub subnet_size: usize,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Aggregates rows by (method, size, metric), in first-appearance order.
pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryEntry> {
    let mut keys: Vec<(String, usize, String)> = Vec::new();
    for r in rows {
        let k = (r.method.clone(), r.subnet_size, r.metric.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .filter_map(|(method, size, metric)| {
            let vals: Vec<f64> = rows
                .iter()
                .filter(|r| r.method == method && r.subnet_size == size && r.metric == metric)
                .map(|r| r.value)
                .collect();
            aggregate(&vals).map(|a| SummaryEntry {
                method,
                subnet_size: size,
                metric,
                mean: a.mean,
                std: a.std,
                n: a.n,
            })
        })
        .collect()
}

/// Plot series `S, mean, std` of one metric for methods whose label starts
/// with `prefix`.
pub fn write_series_csv<W: Write>(summary: &[SummaryEntry], prefix: &str, metric: &str, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method", "subnet_size", "mean", "std"])
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    for e in summary.iter().filter(|e| e.method.starts_with(prefix) && e.metric == metric) {
        w.write_record([
            e.method.clone(),
            e.subnet_size.to_string(),
            e.mean.to_string(),
            e.std.to_string(),
        ])
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io("series", e))
}
