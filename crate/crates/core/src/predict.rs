//! Linearized predictive distributions.
//!
//! Around the MAP the network is replaced by `f(x, ŵ) + J_S(x)(w_S − ŵ_S)`,
//! so a Gaussian posterior on `w_S` gives a Gaussian over outputs with
//! covariance `J_S Σ_S J_Sᵀ`.

use std::f64::consts::PI;
use std::io::Write;

use crate::data::{Standardizer, Task};
use crate::error::{Error, Result};
use crate::laplace::{DiagonalPosterior, GaussianPosterior};
use crate::linalg::{softmax, DenseMatrix};
use crate::net::{forward_into, jacobian_with_output, Jacobian, Scratch};
use crate::rng;
use crate::select::SubnetworkMask;
use crate::train::MapEstimate;

/// Weight uncertainty used at prediction time.
#[derive(Debug, Clone, PartialEq)]
pub enum Posterior {
    /// Point estimate: no model uncertainty.
    Map,
    Gaussian(GaussianPosterior),
    Diagonal(DiagonalPosterior),
}

/// Output mean and model covariance at `x`. Uses `scratch` for the network
/// passes.
pub fn linearized_moments(
    map: &MapEstimate,
    posterior: &Posterior,
    x: &[f64],
    scratch: &mut Scratch,
) -> Result<(Vec<f64>, DenseMatrix)> {
    let o = map.arch.output_dim;
    match posterior {
        Posterior::Map => {
            if x.len() != map.arch.input_dim {
                return Err(Error::dim("prediction input", map.arch.input_dim, x.len()));
            }
            let out = forward_into(&map.arch, &map.weights, x, scratch).to_vec();
            Ok((out, DenseMatrix::zeros(o, o)))
        }
        Posterior::Gaussian(g) => {
            let (jac, out) = jacobian_with_output(&map.arch, &map.weights, x, &g.mask, scratch)?;
            let a = g.whiten(&jac.matrix)?;
            Ok((out, a.transpose().matmul(&a)?))
        }
        Posterior::Diagonal(d) => {
            let mask = SubnetworkMask::new(d.index_map.clone(), map.arch.n_params())?;
            let (jac, out) = jacobian_with_output(&map.arch, &map.weights, x, &mask, scratch)?;
            let mut cov = DenseMatrix::zeros(o, o);
            for a in 0..o {
                for b in 0..=a {
                    let v: f64 = jac
                        .matrix
                        .row(a)
                        .iter()
                        .zip(jac.matrix.row(b))
                        .zip(&d.variances)
                        .map(|((ja, jb), s)| ja * jb * s)
                        .sum();
                    cov[(a, b)] = v;
                    cov[(b, a)] = v;
                }
            }
            Ok((out, cov))
        }
    }
}

/// `J_S Σ_S J_Sᵀ` for a Jacobian whose columns follow the posterior mask.
pub fn linearized_variance(posterior: &GaussianPosterior, jac_s: &Jacobian) -> Result<DenseMatrix> {
    if jac_s.columns != posterior.mask.selected() {
        return Err(Error::IndexMapMismatch);
    }
    let a = posterior.whiten(&jac_s.matrix)?;
    a.transpose().matmul(&a)
}

/// `J_S(x) Σ_S J_S(x)ᵀ` at input `x`, the model part of the predictive
/// covariance.
pub fn model_covariance(map: &MapEstimate, posterior: &Posterior, x: &[f64]) -> Result<DenseMatrix> {
    let mut scratch = Scratch::new(&map.arch);
    linearized_moments(map, posterior, x, &mut scratch).map(|(_, c)| c)
}

/// Predictions for a batch of inputs (rows of `inputs`).
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub task: Task,
    /// Regression mean or classification logits at the MAP, N × O.
    pub mean: DenseMatrix,
    /// Diagonal of the model covariance per point, N × O.
    pub model_variance: DenseMatrix,
    /// Observation noise variance (regression).
    pub noise_variance: Option<f64>,
    /// Probit-approximated class probabilities (classification), N × O.
    pub probabilities: Option<DenseMatrix>,
}

impl Prediction {
    pub fn len(&self) -> usize {
        self.mean.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Predictive variance `model + σ²` (regression).
    pub fn total_variance(&self) -> DenseMatrix {
        let mut v = self.model_variance.clone();
        let noise = self.noise_variance.unwrap_or(0.0);
        for i in 0..v.rows() {
            v.row_mut(i).iter_mut().for_each(|x| *x += noise);
        }
        v
    }

    /// Maps regression moments back to the original target scale.
    pub fn destandardize(&self, targets: &Standardizer) -> Result<Prediction> {
        if self.task != Task::Regression {
            return Ok(self.clone());
        }
        if targets.std.len() != self.mean.cols() {
            return Err(Error::dim("target standardizer", self.mean.cols(), targets.std.len()));
        }
        if targets.std.len() != 1 && self.noise_variance.is_some() {
            // A shared σ² no longer describes outputs with different scales.
            let uniform = targets.std.windows(2).all(|w| w[0] == w[1]);
            if !uniform {
                return Err(Error::InvalidConfig(
                    "per-output target scales need per-output noise variances".into(),
                ));
            }
        }
        let mean = targets.inverse_transform(&self.mean);
        let mut model_variance = self.model_variance.clone();
        for i in 0..model_variance.rows() {
            for (v, s) in model_variance.row_mut(i).iter_mut().zip(&targets.std) {
                *v *= s * s;
            }
        }
        Ok(Prediction {
            task: self.task,
            mean,
            model_variance,
            noise_variance: self.noise_variance.map(|v| v * targets.std[0] * targets.std[0]),
            probabilities: None,
        })
    }

    /// One row per point: `index,mean_k…,model_var_k…` then either
    /// `total_var_k…` (regression) or `prob_k…` (classification).
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let o = self.mean.cols();
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["index".to_string()];
        header.extend((0..o).map(|k| format!("mean_{k}")));
        header.extend((0..o).map(|k| format!("model_var_{k}")));
        let last = match self.task {
            Task::Regression => "total_var",
            Task::Classification => "prob",
        };
        header.extend((0..o).map(|k| format!("{last}_{k}")));
        w.write_record(&header).map_err(csv_err)?;
        let total = self.total_variance();
        for i in 0..self.len() {
            let mut rec = vec![i.to_string()];
            rec.extend(self.mean.row(i).iter().map(f64::to_string));
            rec.extend(self.model_variance.row(i).iter().map(f64::to_string));
            let tail = match (&self.task, &self.probabilities) {
                (Task::Classification, Some(p)) => p.row(i),
                _ => total.row(i),
            };
            rec.extend(tail.iter().map(f64::to_string));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io("predictions", e))?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse {
        row: 0,
        column: String::new(),
        message: e.to_string(),
    }
}

/// `softmax(f / √(1 + π/8 · diag Σ))`.
pub fn probit_probabilities(logits: &[f64], variances: &[f64]) -> Vec<f64> {
    let scaled: Vec<f64> = logits
        .iter()
        .zip(variances)
        .map(|(f, v)| f / (1.0 + PI / 8.0 * v).sqrt())
        .collect();
    softmax(&scaled)
}

fn predict_all(map: &MapEstimate, posterior: &Posterior, inputs: &DenseMatrix) -> Result<(DenseMatrix, DenseMatrix)> {
    if inputs.cols() != map.arch.input_dim {
        return Err(Error::dim("prediction inputs", map.arch.input_dim, inputs.cols()));
    }
    let o = map.arch.output_dim;
    let n = inputs.rows();
    let mut mean = DenseMatrix::zeros(n, o);
    let mut var = DenseMatrix::zeros(n, o);
    let mut scratch = Scratch::new(&map.arch);
    for i in 0..n {
        let (m, c) = linearized_moments(map, posterior, inputs.row(i), &mut scratch)?;
        mean.row_mut(i).copy_from_slice(&m);
        var.row_mut(i).copy_from_slice(&c.diagonal());
    }
    Ok((mean, var))
}

/// Gaussian predictive `N(f(x, ŵ), J Σ Jᵀ + σ²I)` per input row.
pub fn predict_regression(map: &MapEstimate, posterior: &Posterior, inputs: &DenseMatrix) -> Result<Prediction> {
    if map.task != Task::Regression {
        return Err(Error::TaskMismatch { expected: "regression" });
    }
    let noise = map.noise_variance().unwrap_or(f64::NAN);
    if !(noise > 0.0 && noise.is_finite()) {
        return Err(Error::InvalidNoiseVariance(noise));
    }
    let (mean, model_variance) = predict_all(map, posterior, inputs)?;
    Ok(Prediction {
        task: Task::Regression,
        mean,
        model_variance,
        noise_variance: Some(noise),
        probabilities: None,
    })
}

/// Probit-approximated class probabilities per input row.
pub fn predict_classification(map: &MapEstimate, posterior: &Posterior, inputs: &DenseMatrix) -> Result<Prediction> {
    if map.task != Task::Classification {
        return Err(Error::TaskMismatch { expected: "classification" });
    }
    let (mean, model_variance) = predict_all(map, posterior, inputs)?;
    let mut probs = DenseMatrix::zeros(mean.rows(), mean.cols());
    for i in 0..mean.rows() {
        let p = probit_probabilities(mean.row(i), model_variance.row(i));
        probs.row_mut(i).copy_from_slice(&p);
    }
    Ok(Prediction {
        task: Task::Classification,
        mean,
        model_variance,
        noise_variance: None,
        probabilities: Some(probs),
    })
}

pub fn predict(map: &MapEstimate, posterior: &Posterior, inputs: &DenseMatrix) -> Result<Prediction> {
    match map.task {
        Task::Regression => predict_regression(map, posterior, inputs),
        Task::Classification => predict_classification(map, posterior, inputs),
    }
}

/// Monte Carlo draws of the linearized model output at `x`:
/// `f(x, ŵ) + J_S(x)(w_S − ŵ_S)` with `w_S` sampled from the posterior.
/// Returns an `n × O` matrix.
pub fn sample_linearized_outputs(
    map: &MapEstimate,
    posterior: &GaussianPosterior,
    x: &[f64],
    n_samples: usize,
    seed: u64,
) -> Result<DenseMatrix> {
    let mut scratch = Scratch::new(&map.arch);
    let (jac, out) = jacobian_with_output(&map.arch, &map.weights, x, &posterior.mask, &mut scratch)?;
    let mut rng = rng::stream(seed, "predict/mc");
    let o = out.len();
    let mut samples = DenseMatrix::zeros(n_samples, o);
    let mut delta = vec![0.0; posterior.dim()];
    for s in 0..n_samples {
        let w = posterior.sample(&mut rng);
        for ((d, wi), mi) in delta.iter_mut().zip(&w).zip(&posterior.mean) {
            *d = wi - mi;
        }
        let jd = jac.matrix.matvec(&delta)?;
        for (dst, (f, v)) in samples.row_mut(s).iter_mut().zip(out.iter().zip(jd)) {
            *dst = f + v;
        }
    }
    Ok(samples)
}

/// Monte Carlo class probabilities: the average softmax of linearized
/// output draws.
pub fn mc_class_probabilities(
    map: &MapEstimate,
    posterior: &GaussianPosterior,
    x: &[f64],
    n_samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let samples = sample_linearized_outputs(map, posterior, x, n_samples, seed)?;
    let mut mean = vec![0.0; samples.cols()];
    for s in 0..samples.rows() {
        for (m, p) in mean.iter_mut().zip(softmax(samples.row(s))) {
            *m += p;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n_samples as f64);
    Ok(mean)
}
