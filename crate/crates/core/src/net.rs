//! Fully connected ReLU networks over a flat parameter vector.
//!
//! Parameter layout: all weight matrices first (layer by layer, each stored
//! row-major with shape `fan_out × fan_in`), then all bias vectors (layer by
//! layer). With this ordering the weights-only parameter set used for
//! inference is the prefix `0..n_weights`, so a flat index and an
//! inference-eligible index coincide whether or not biases are included.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, DenseMatrix};
use crate::select::SubnetworkMask;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative; the ReLU subgradient at exactly zero is taken as 0.
    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpArchitecture {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub output_dim: usize,
    #[serde(default)]
    pub activation: Activation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Weight,
    Bias,
}

/// Coordinates of one flat parameter. Biases use `col = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamIndex {
    pub layer: usize,
    pub kind: ParamKind,
    pub row: usize,
    pub col: usize,
}

impl MlpArchitecture {
    pub fn new(input_dim: usize, hidden_widths: Vec<usize>, output_dim: usize) -> Result<Self> {
        let arch = Self {
            input_dim,
            hidden_widths,
            output_dim,
            activation: Activation::Relu,
        };
        arch.validate()?;
        Ok(arch)
    }

    /// `depth` hidden layers of equal `width`.
    pub fn uniform(input_dim: usize, width: usize, depth: usize, output_dim: usize) -> Result<Self> {
        Self::new(input_dim, vec![width; depth], output_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_widths.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "all layer sizes must be at least 1: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn n_layers(&self) -> usize {
        self.hidden_widths.len() + 1
    }

    /// `(fan_in, fan_out)` of layer `l`.
    pub fn layer_shape(&self, l: usize) -> (usize, usize) {
        let fan_in = if l == 0 {
            self.input_dim
        } else {
            self.hidden_widths[l - 1]
        };
        let fan_out = if l == self.hidden_widths.len() {
            self.output_dim
        } else {
            self.hidden_widths[l]
        };
        (fan_in, fan_out)
    }

    pub fn n_weights(&self) -> usize {
        (0..self.n_layers())
            .map(|l| {
                let (i, o) = self.layer_shape(l);
                i * o
            })
            .sum()
    }

    pub fn n_biases(&self) -> usize {
        (0..self.n_layers()).map(|l| self.layer_shape(l).1).sum()
    }

    pub fn n_params(&self) -> usize {
        self.n_weights() + self.n_biases()
    }

    /// Number of inference-eligible parameters.
    pub fn eligible_count(&self, include_biases: bool) -> usize {
        if include_biases {
            self.n_params()
        } else {
            self.n_weights()
        }
    }

    pub fn weight_offset(&self, l: usize) -> usize {
        (0..l)
            .map(|k| {
                let (i, o) = self.layer_shape(k);
                i * o
            })
            .sum()
    }

    pub fn bias_offset(&self, l: usize) -> usize {
        self.n_weights() + (0..l).map(|k| self.layer_shape(k).1).sum::<usize>()
    }

    /// The closed-form weight count `(i+1)·w + (h−1)·w²` for a single-output
    /// network with `h ≥ 1` hidden layers of equal width `w`.
    pub fn equal_width_weight_count(&self) -> Option<usize> {
        let w = *self.hidden_widths.first()?;
        if self.output_dim != 1 || self.hidden_widths.iter().any(|&x| x != w) {
            return None;
        }
        let h = self.hidden_widths.len();
        Some((self.input_dim + 1) * w + (h - 1) * w * w)
    }

    pub fn param_index(&self, flat: usize) -> Option<ParamIndex> {
        let n_weights = self.n_weights();
        if flat < n_weights {
            let mut off = 0;
            for layer in 0..self.n_layers() {
                let (fan_in, fan_out) = self.layer_shape(layer);
                if flat < off + fan_in * fan_out {
                    let local = flat - off;
                    return Some(ParamIndex {
                        layer,
                        kind: ParamKind::Weight,
                        row: local / fan_in,
                        col: local % fan_in,
                    });
                }
                off += fan_in * fan_out;
            }
            None
        } else {
            let mut off = n_weights;
            for layer in 0..self.n_layers() {
                let fan_out = self.layer_shape(layer).1;
                if flat < off + fan_out {
                    return Some(ParamIndex {
                        layer,
                        kind: ParamKind::Bias,
                        row: flat - off,
                        col: 0,
                    });
                }
                off += fan_out;
            }
            None
        }
    }

    pub fn flat_index(&self, p: ParamIndex) -> Option<usize> {
        if p.layer >= self.n_layers() {
            return None;
        }
        let (fan_in, fan_out) = self.layer_shape(p.layer);
        match p.kind {
            ParamKind::Weight if p.row < fan_out && p.col < fan_in => {
                Some(self.weight_offset(p.layer) + p.row * fan_in + p.col)
            }
            ParamKind::Bias if p.row < fan_out && p.col == 0 => {
                Some(self.bias_offset(p.layer) + p.row)
            }
            _ => None,
        }
    }

    pub fn index_map(&self) -> Vec<ParamIndex> {
        (0..self.n_params())
            .map(|i| self.param_index(i).expect("index within parameter count"))
            .collect()
    }

    /// Flat indices of the output layer's weights, plus its biases if requested.
    pub fn final_layer_indices(&self, include_biases: bool) -> Vec<usize> {
        let last = self.n_layers() - 1;
        let (fan_in, fan_out) = self.layer_shape(last);
        let start = self.weight_offset(last);
        let mut out: Vec<usize> = (start..start + fan_in * fan_out).collect();
        if include_biases {
            let b = self.bias_offset(last);
            out.extend(b..b + fan_out);
        }
        out
    }

    /// He initialization for weights, `N(0, 2/fan_in)`; biases uniform on
    /// `±1/√fan_in`. Zero biases would put every first-layer kink of a 1-D
    /// input network at the origin.
    pub fn init_weights<R: Rng + ?Sized>(&self, rng: &mut R) -> WeightVector {
        let mut values = vec![0.0; self.n_params()];
        for l in 0..self.n_layers() {
            let (fan_in, fan_out) = self.layer_shape(l);
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
            let off = self.weight_offset(l);
            for v in &mut values[off..off + fan_in * fan_out] {
                *v = normal.sample(rng);
            }
            let bound = 1.0 / (fan_in as f64).sqrt();
            let off = self.bias_offset(l);
            for v in &mut values[off..off + fan_out] {
                *v = rng.random_range(-bound..bound);
            }
        }
        WeightVector { values }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WeightVector {
    values: Vec<f64>,
}

impl WeightVector {
    pub fn new(arch: &MlpArchitecture, values: Vec<f64>) -> Result<Self> {
        if values.len() != arch.n_params() {
            return Err(Error::dim("WeightVector::new", arch.n_params(), values.len()));
        }
        Ok(Self { values })
    }

    pub fn zeros(arch: &MlpArchitecture) -> Self {
        Self {
            values: vec![0.0; arch.n_params()],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// `∂f_i/∂w_j` for the columns listed in `columns`.
#[derive(Debug, Clone, PartialEq)]
pub struct Jacobian {
    pub matrix: DenseMatrix,
    pub columns: Vec<usize>,
}

/// Reusable buffers for forward/backward passes.
#[derive(Debug, Clone)]
pub struct Scratch {
    // pre[l] = pre-activation of layer l; post[l] = its output (input for l+1).
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

impl Scratch {
    pub fn new(arch: &MlpArchitecture) -> Self {
        let widths: Vec<usize> = (0..arch.n_layers()).map(|l| arch.layer_shape(l).1).collect();
        let max_w = widths.iter().copied().max().unwrap_or(0).max(arch.input_dim);
        Self {
            pre: widths.iter().map(|&w| vec![0.0; w]).collect(),
            post: widths.iter().map(|&w| vec![0.0; w]).collect(),
            delta: Vec::with_capacity(max_w),
            delta_prev: Vec::with_capacity(max_w),
        }
    }

    /// Pre-activations of hidden layer `l` from the last forward pass.
    pub fn pre_activation(&self, l: usize) -> &[f64] {
        &self.pre[l]
    }

    pub fn output(&self) -> &[f64] {
        self.post.last().expect("at least one layer")
    }
}

fn check_dims(arch: &MlpArchitecture, w: &WeightVector, x: &[f64]) -> Result<()> {
    if w.len() != arch.n_params() {
        return Err(Error::dim("network parameters", arch.n_params(), w.len()));
    }
    if x.len() != arch.input_dim {
        return Err(Error::dim("network input", arch.input_dim, x.len()));
    }
    Ok(())
}

/// Forward pass into `scratch`; unchecked shapes.
pub fn forward_into<'s>(
    arch: &MlpArchitecture,
    w: &WeightVector,
    x: &[f64],
    scratch: &'s mut Scratch,
) -> &'s [f64] {
    let last = arch.n_layers() - 1;
    for l in 0..arch.n_layers() {
        let (fan_in, fan_out) = arch.layer_shape(l);
        let wo = arch.weight_offset(l);
        let bo = arch.bias_offset(l);
        let weights = &w.values[wo..wo + fan_in * fan_out];
        let biases = &w.values[bo..bo + fan_out];
        let (before, after) = scratch.post.split_at_mut(l);
        let input: &[f64] = if l == 0 { x } else { &before[l - 1] };
        let pre = &mut scratch.pre[l];
        for r in 0..fan_out {
            pre[r] = dot(&weights[r * fan_in..(r + 1) * fan_in], input) + biases[r];
        }
        let out = &mut after[0];
        if l == last {
            out.copy_from_slice(pre);
        } else {
            for (o, &z) in out.iter_mut().zip(pre.iter()) {
                *o = arch.activation.apply(z);
            }
        }
    }
    scratch.output()
}

/// Adds `∂(upstreamᵀ f)/∂w` into `grad` using the activations left in
/// `scratch` by [`forward_into`] on the same `x`.
pub fn backward_into(
    arch: &MlpArchitecture,
    w: &WeightVector,
    x: &[f64],
    scratch: &mut Scratch,
    upstream: &[f64],
    grad: &mut [f64],
) {
    let Scratch {
        pre,
        post,
        delta,
        delta_prev,
    } = scratch;
    delta.clear();
    delta.extend_from_slice(upstream);
    for l in (0..arch.n_layers()).rev() {
        let (fan_in, fan_out) = arch.layer_shape(l);
        let wo = arch.weight_offset(l);
        let bo = arch.bias_offset(l);
        let input: &[f64] = if l == 0 { x } else { &post[l - 1] };
        for r in 0..fan_out {
            let d = delta[r];
            if d != 0.0 {
                axpy(d, input, &mut grad[wo + r * fan_in..wo + (r + 1) * fan_in]);
                grad[bo + r] += d;
            }
        }
        if l == 0 {
            break;
        }
        delta_prev.clear();
        delta_prev.resize(fan_in, 0.0);
        let weights = &w.values[wo..wo + fan_in * fan_out];
        for r in 0..fan_out {
            let d = delta[r];
            if d != 0.0 {
                axpy(d, &weights[r * fan_in..(r + 1) * fan_in], delta_prev);
            }
        }
        for (dp, &z) in delta_prev.iter_mut().zip(pre[l - 1].iter()) {
            *dp *= arch.activation.derivative(z);
        }
        std::mem::swap(delta, delta_prev);
    }
}

pub fn forward(arch: &MlpArchitecture, w: &WeightVector, x: &[f64]) -> Result<Vec<f64>> {
    check_dims(arch, w, x)?;
    let mut scratch = Scratch::new(arch);
    Ok(forward_into(arch, w, x, &mut scratch).to_vec())
}

pub fn grad_params(
    arch: &MlpArchitecture,
    w: &WeightVector,
    x: &[f64],
    upstream: &[f64],
) -> Result<Vec<f64>> {
    check_dims(arch, w, x)?;
    if upstream.len() != arch.output_dim {
        return Err(Error::dim("output cotangent", arch.output_dim, upstream.len()));
    }
    let mut scratch = Scratch::new(arch);
    forward_into(arch, w, x, &mut scratch);
    let mut grad = vec![0.0; arch.n_params()];
    backward_into(arch, w, x, &mut scratch, upstream, &mut grad);
    Ok(grad)
}

/// Jacobian rows for every output (one reverse sweep each), columns
/// restricted to `mask`. Also returns the network output at `x`.
pub fn jacobian_with_output(
    arch: &MlpArchitecture,
    w: &WeightVector,
    x: &[f64],
    mask: &SubnetworkMask,
    scratch: &mut Scratch,
) -> Result<(Jacobian, Vec<f64>)> {
    check_dims(arch, w, x)?;
    if mask.total() > arch.n_params() {
        return Err(Error::dim("subnetwork mask", arch.n_params(), mask.total()));
    }
    let output = forward_into(arch, w, x, scratch).to_vec();
    let o = arch.output_dim;
    let cols = mask.selected();
    let mut matrix = DenseMatrix::zeros(o, cols.len());
    let mut grad = vec![0.0; arch.n_params()];
    let mut upstream = vec![0.0; o];
    for i in 0..o {
        grad.iter_mut().for_each(|g| *g = 0.0);
        upstream.iter_mut().for_each(|u| *u = 0.0);
        upstream[i] = 1.0;
        backward_into(arch, w, x, scratch, &upstream, &mut grad);
        for (dst, &c) in matrix.row_mut(i).iter_mut().zip(cols) {
            *dst = grad[c];
        }
    }
    Ok((
        Jacobian {
            matrix,
            columns: cols.to_vec(),
        },
        output,
    ))
}

pub fn jacobian(
    arch: &MlpArchitecture,
    w: &WeightVector,
    x: &[f64],
    mask: &SubnetworkMask,
) -> Result<Jacobian> {
    let mut scratch = Scratch::new(arch);
    jacobian_with_output(arch, w, x, mask, &mut scratch).map(|(j, _)| j)
}

/// On-disk network checkpoint (JSON). `serde_json` writes the shortest
/// decimal that round-trips each `f64`, and parsing is exact, so
/// save/load is lossless.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub architecture: MlpArchitecture,
    pub weights: Vec<f64>,
    pub noise_log_variance: Option<f64>,
    pub seed: u64,
    pub training_meta: serde_json::Value,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        ck.architecture.validate()?;
        if ck.weights.len() != ck.architecture.n_params() {
            return Err(Error::dim(
                "checkpoint weights",
                ck.architecture.n_params(),
                ck.weights.len(),
            ));
        }
        Ok(ck)
    }
}
