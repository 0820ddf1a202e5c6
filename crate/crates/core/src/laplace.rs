//! GGN curvature and Gaussian (Laplace) posteriors over a parameter subset.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Task};
use crate::error::{Error, Result};
use crate::linalg::{cholesky, dot, softmax, CholeskyFactor, DenseMatrix};
use crate::net::{jacobian_with_output, Scratch};
use crate::select::SubnetworkMask;
use crate::train::MapEstimate;

/// Largest diagonal jitter accepted when factoring a posterior precision.
pub const DEFAULT_MAX_JITTER: f64 = 1e-6;

/// Rows per accumulation chunk; chunk sums are combined pairwise.
const CHUNK_ROWS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GgnKind {
    Full,
    Diagonal,
    Subnetwork,
}

#[derive(Debug, Clone, PartialEq)]
enum GgnData {
    Dense(DenseMatrix),
    Diagonal(Vec<f64>),
}

/// Data term `Σ_n J_nᵀ H_n J_n` over the parameters in `index_map`, together
/// with the prior precision that is added on the diagonal on use.
#[derive(Debug, Clone, PartialEq)]
pub struct GgnMatrix {
    kind: GgnKind,
    data: GgnData,
    prior_precision: f64,
    index_map: Vec<usize>,
}

fn check_prior(prior_precision: f64) -> Result<()> {
    if !(prior_precision >= 0.0 && prior_precision.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "prior precision must be finite and non-negative, got {prior_precision}"
        )));
    }
    Ok(())
}

impl GgnMatrix {
    pub fn full(data_term: DenseMatrix, prior_precision: f64, index_map: Vec<usize>) -> Result<Self> {
        Self::dense(GgnKind::Full, data_term, prior_precision, index_map)
    }

    pub fn subnetwork(data_term: DenseMatrix, prior_precision: f64, index_map: Vec<usize>) -> Result<Self> {
        Self::dense(GgnKind::Subnetwork, data_term, prior_precision, index_map)
    }

    fn dense(kind: GgnKind, data_term: DenseMatrix, prior_precision: f64, index_map: Vec<usize>) -> Result<Self> {
        check_prior(prior_precision)?;
        if !data_term.is_square() || data_term.rows() != index_map.len() {
            return Err(Error::dim("GGN data term", index_map.len(), data_term.rows()));
        }
        Ok(Self {
            kind,
            data: GgnData::Dense(data_term),
            prior_precision,
            index_map,
        })
    }

    pub fn diagonal(data_term: Vec<f64>, prior_precision: f64, index_map: Vec<usize>) -> Result<Self> {
        check_prior(prior_precision)?;
        if data_term.len() != index_map.len() {
            return Err(Error::dim("GGN diagonal", index_map.len(), data_term.len()));
        }
        Ok(Self {
            kind: GgnKind::Diagonal,
            data: GgnData::Diagonal(data_term),
            prior_precision,
            index_map,
        })
    }

    pub fn kind(&self) -> GgnKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.index_map.len()
    }

    pub fn prior_precision(&self) -> f64 {
        self.prior_precision
    }

    pub fn index_map(&self) -> &[usize] {
        &self.index_map
    }

    /// Same data term with a different prior precision.
    pub fn with_prior(&self, prior_precision: f64) -> Result<Self> {
        check_prior(prior_precision)?;
        Ok(Self {
            prior_precision,
            ..self.clone()
        })
    }

    /// Dense data term (full and subnetwork kinds).
    pub fn data_term(&self) -> Option<&DenseMatrix> {
        match &self.data {
            GgnData::Dense(m) => Some(m),
            GgnData::Diagonal(_) => None,
        }
    }

    /// Diagonal of the data term, before the prior.
    pub fn data_term_diagonal(&self) -> Vec<f64> {
        match &self.data {
            GgnData::Dense(m) => m.diagonal(),
            GgnData::Diagonal(d) => d.clone(),
        }
    }

    /// Data term plus `λ·I`, as a dense matrix.
    pub fn regularized(&self) -> DenseMatrix {
        let mut m = match &self.data {
            GgnData::Dense(m) => m.clone(),
            GgnData::Diagonal(d) => DenseMatrix::from_diag(d),
        };
        m.add_to_diagonal(self.prior_precision);
        m
    }

    pub fn regularized_diagonal(&self) -> Vec<f64> {
        self.data_term_diagonal()
            .into_iter()
            .map(|d| d + self.prior_precision)
            .collect()
    }

    pub fn to_diagonal(&self) -> GgnMatrix {
        GgnMatrix {
            kind: GgnKind::Diagonal,
            data: GgnData::Diagonal(self.data_term_diagonal()),
            prior_precision: self.prior_precision,
            index_map: self.index_map.clone(),
        }
    }

    /// Rows/columns of a full GGN belonging to `mask`, with a new prior.
    pub fn restrict(&self, mask: &SubnetworkMask, prior_precision: f64) -> Result<GgnMatrix> {
        check_prior(prior_precision)?;
        if mask.total() != self.dim() {
            return Err(Error::dim("GGN restriction", self.dim(), mask.total()));
        }
        let index_map = mask.selected().iter().map(|&i| self.index_map[i]).collect();
        let data = match &self.data {
            GgnData::Dense(m) => GgnData::Dense(m.principal_submatrix(mask.selected())),
            GgnData::Diagonal(d) => GgnData::Diagonal(mask.selected().iter().map(|&i| d[i]).collect()),
        };
        let kind = match self.kind {
            GgnKind::Diagonal => GgnKind::Diagonal,
            _ if mask.is_full() => self.kind,
            _ => GgnKind::Subnetwork,
        };
        Ok(GgnMatrix {
            kind,
            data,
            prior_precision,
            index_map,
        })
    }
}

/// Hessian of the negative log-likelihood w.r.t. the network output.
///
/// Regression: `I/σ²`. Classification: `diag(p) − p·pᵀ` with
/// `p = softmax(output)`.
pub fn likelihood_hessian(task: Task, model_output: &[f64], noise_variance: Option<f64>) -> Result<DenseMatrix> {
    match task {
        Task::Regression => {
            let var = noise_variance.unwrap_or(f64::NAN);
            if !(var > 0.0 && var.is_finite()) {
                return Err(Error::InvalidNoiseVariance(var));
            }
            let mut h = DenseMatrix::identity(model_output.len());
            h = h.scaled(1.0 / var);
            Ok(h)
        }
        Task::Classification => {
            let p = softmax(model_output);
            let o = p.len();
            let mut h = DenseMatrix::zeros(o, o);
            for i in 0..o {
                for j in 0..o {
                    h[(i, j)] = if i == j { p[i] } else { 0.0 } - p[i] * p[j];
                }
            }
            Ok(h)
        }
    }
}

/// Rows `G_n` with `G_nᵀ G_n = J_nᵀ H_n J_n`. Regression uses `J/σ`; the
/// categorical Hessian factors as `Σ_a p_a (e_a − p)(e_a − p)ᵀ`.
fn factor_rows(task: Task, jac: &DenseMatrix, output: &[f64], noise_variance: Option<f64>, out: &mut Vec<Vec<f64>>) {
    match task {
        Task::Regression => {
            let scale = 1.0 / noise_variance.expect("checked by caller").sqrt();
            for a in 0..jac.rows() {
                out.push(jac.row(a).iter().map(|v| v * scale).collect());
            }
        }
        Task::Classification => {
            let p = softmax(output);
            let k = jac.cols();
            let mut mean = vec![0.0; k];
            for (a, pa) in p.iter().enumerate() {
                crate::linalg::axpy(*pa, jac.row(a), &mut mean);
            }
            for (a, pa) in p.iter().enumerate() {
                let s = pa.sqrt();
                out.push(jac.row(a).iter().zip(&mean).map(|(j, m)| s * (j - m)).collect());
            }
        }
    }
}

/// Deterministic pairwise reduction: a binary-counter stack of partial sums.
struct PairwiseAccumulator<T> {
    stack: Vec<(u32, T)>,
    combine: fn(&mut T, &T),
}

impl<T> PairwiseAccumulator<T> {
    fn new(combine: fn(&mut T, &T)) -> Self {
        Self {
            stack: Vec::new(),
            combine,
        }
    }

    fn push(&mut self, value: T) {
        let mut item = (0u32, value);
        while let Some((level, _)) = self.stack.last() {
            if *level != item.0 {
                break;
            }
            let (level, mut left) = self.stack.pop().expect("non-empty");
            (self.combine)(&mut left, &item.1);
            item = (level + 1, left);
        }
        self.stack.push(item);
    }

    fn finish(mut self) -> Option<T> {
        let (_, mut acc) = self.stack.pop()?;
        while let Some((_, mut left)) = self.stack.pop() {
            (self.combine)(&mut left, &acc);
            acc = left;
        }
        Some(acc)
    }
}

fn add_dense(a: &mut DenseMatrix, b: &DenseMatrix) {
    *a = a.add(b).expect("same shape");
}

// Signature fixed by the accumulator's fn-pointer type.
#[allow(clippy::ptr_arg)]
fn add_vec(a: &mut Vec<f64>, b: &Vec<f64>) {
    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
}

fn chunk_gram(rows: &[Vec<f64>], k: usize) -> DenseMatrix {
    // Transpose so each parameter's column is contiguous.
    let r = rows.len();
    let mut cols = DenseMatrix::zeros(k, r);
    for (ri, row) in rows.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            cols[(c, ri)] = *v;
        }
    }
    let mut out = DenseMatrix::zeros(k, k);
    for i in 0..k {
        let ci = cols.row(i);
        for j in i..k {
            let v = dot(ci, cols.row(j));
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

fn chunk_diag(rows: &[Vec<f64>], k: usize) -> Vec<f64> {
    let mut d = vec![0.0; k];
    for row in rows {
        for (acc, v) in d.iter_mut().zip(row) {
            *acc += v * v;
        }
    }
    d
}

/// Accumulates `Σ_n J_nᵀ H_n J_n` over every point of `data` at the MAP
/// parameters, for the columns in `mask`.
///
/// `kind = Full` requires a full mask; `Diagonal` keeps only the diagonal of
/// the same sum. Points are processed in chunks whose partial sums are
/// combined in a fixed binary tree, so the result does not depend on
/// anything but the data order.
pub fn compute_ggn(
    map: &MapEstimate,
    data: &Dataset,
    mask: &SubnetworkMask,
    kind: GgnKind,
    prior_precision: f64,
) -> Result<GgnMatrix> {
    check_prior(prior_precision)?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if data.input_dim() != map.arch.input_dim {
        return Err(Error::dim("GGN inputs", map.arch.input_dim, data.input_dim()));
    }
    if kind == GgnKind::Full && !mask.is_full() {
        return Err(Error::InvalidConfig("a full GGN needs a full mask".into()));
    }
    let noise_variance = map.noise_variance();
    if map.task == Task::Regression {
        let v = noise_variance.unwrap_or(f64::NAN);
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::InvalidNoiseVariance(v));
        }
    }
    let k = mask.len();
    let mut scratch = Scratch::new(&map.arch);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(CHUNK_ROWS + map.arch.output_dim);
    let mut dense = PairwiseAccumulator::new(add_dense as fn(&mut DenseMatrix, &DenseMatrix));
    let mut diag = PairwiseAccumulator::new(add_vec as fn(&mut Vec<f64>, &Vec<f64>));
    let mut flush = |rows: &mut Vec<Vec<f64>>| {
        if kind == GgnKind::Diagonal {
            diag.push(chunk_diag(rows, k));
        } else {
            dense.push(chunk_gram(rows, k));
        }
        rows.clear();
    };
    for i in 0..data.len() {
        let (jac, output) = jacobian_with_output(&map.arch, &map.weights, data.input(i), mask, &mut scratch)?;
        factor_rows(map.task, &jac.matrix, &output, noise_variance, &mut rows);
        if rows.len() >= CHUNK_ROWS {
            flush(&mut rows);
        }
    }
    if !rows.is_empty() {
        flush(&mut rows);
    }
    let index_map = mask.selected().to_vec();
    match kind {
        GgnKind::Diagonal => GgnMatrix::diagonal(diag.finish().expect("non-empty data"), prior_precision, index_map),
        GgnKind::Full => GgnMatrix::full(dense.finish().expect("non-empty data"), prior_precision, index_map),
        GgnKind::Subnetwork => GgnMatrix::subnetwork(dense.finish().expect("non-empty data"), prior_precision, index_map),
    }
}

/// Prior precision for a subnetwork of `s` out of `d` weights: `λ·s/d`,
/// which keeps the Jacobian-kernel sum at the full-network magnitude.
pub fn rescale_prior(lambda_full: f64, s: usize, d: usize) -> Result<f64> {
    if s == 0 || s > d {
        return Err(Error::InvalidSize(format!("subnetwork size {s} not in [1, {d}]")));
    }
    if !(lambda_full > 0.0 && lambda_full.is_finite()) {
        return Err(Error::InvalidConfig(format!("prior precision must be positive, got {lambda_full}")));
    }
    Ok(lambda_full * s as f64 / d as f64)
}

/// Diagonal of `H̃⁻¹` for a dense GGN.
pub fn exact_marginal_variances(ggn: &GgnMatrix) -> Result<Vec<f64>> {
    if ggn.kind() == GgnKind::Diagonal {
        return Err(Error::MissingCurvature("exact marginal variances"));
    }
    Ok(cholesky(&ggn.regularized(), DEFAULT_MAX_JITTER)?.inverse_diagonal())
}

/// `1 / diag(H̃)`, the diagonal-Laplace marginal variances.
pub fn diag_marginal_variances(ggn: &GgnMatrix) -> Result<Vec<f64>> {
    ggn.regularized_diagonal()
        .into_iter()
        .enumerate()
        .map(|(index, v)| {
            if v > 0.0 && v.is_finite() {
                Ok(1.0 / v)
            } else {
                Err(Error::NonPositiveDiagonal { index, value: v })
            }
        })
        .collect()
}

/// How the covariance of a [`GaussianPosterior`] is represented.
#[derive(Debug, Clone, PartialEq)]
pub enum CovarianceForm {
    /// Cholesky factor of the precision `H̃_S`.
    Precision(CholeskyFactor),
    /// Cholesky factor of the covariance itself.
    Covariance(CholeskyFactor),
}

/// `N(ŵ_S, H̃_S⁻¹)` over the masked parameters; every other parameter stays
/// at its MAP value.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior {
    pub mean: Vec<f64>,
    pub covariance: CovarianceForm,
    pub mask: SubnetworkMask,
    /// MAP values of the complement of `mask`, in complement order.
    pub complement_values: Vec<f64>,
    pub prior_precision: f64,
    pub noise_variance: Option<f64>,
}

fn split_map(map: &MapEstimate, mask: &SubnetworkMask) -> Result<(Vec<f64>, Vec<f64>)> {
    let w = map.weights.values();
    if mask.total() > w.len() {
        return Err(Error::dim("posterior mask", w.len(), mask.total()));
    }
    let mean = mask.selected().iter().map(|&i| w[i]).collect();
    let complement = mask.complement().iter().map(|&i| w[i]).collect();
    Ok((mean, complement))
}

/// Gaussian posterior from a dense GGN whose index map matches `mask`.
pub fn build_posterior(ggn: &GgnMatrix, map: &MapEstimate, mask: &SubnetworkMask) -> Result<GaussianPosterior> {
    if ggn.index_map() != mask.selected() {
        return Err(Error::IndexMapMismatch);
    }
    if ggn.kind() == GgnKind::Diagonal {
        return Err(Error::InvalidConfig("build_posterior needs a dense GGN; use DiagonalPosterior".into()));
    }
    let factor = cholesky(&ggn.regularized(), DEFAULT_MAX_JITTER)?;
    let (mean, complement_values) = split_map(map, mask)?;
    Ok(GaussianPosterior {
        mean,
        covariance: CovarianceForm::Precision(factor),
        mask: mask.clone(),
        complement_values,
        prior_precision: ggn.prior_precision(),
        noise_variance: map.noise_variance(),
    })
}

impl GaussianPosterior {
    /// Marginal of a larger Gaussian posterior on `mask` (a subset of its
    /// parameters): the corresponding block of its covariance.
    pub fn marginal(full: &GaussianPosterior, mask: &SubnetworkMask, map: &MapEstimate) -> Result<Self> {
        let pos: Vec<usize> = mask
            .selected()
            .iter()
            .map(|&i| full.mask.selected().binary_search(&i).map_err(|_| Error::IndexMapMismatch))
            .collect::<Result<_>>()?;
        let block = match &full.covariance {
            // Only the needed columns of H̃⁻¹.
            CovarianceForm::Precision(f) => {
                let k = pos.len();
                let mut block = DenseMatrix::zeros(k, k);
                let mut e = vec![0.0; full.dim()];
                for (c, &j) in pos.iter().enumerate() {
                    e.iter_mut().for_each(|v| *v = 0.0);
                    e[j] = 1.0;
                    let col = f.solve_vec(&e)?;
                    for (r, &i) in pos.iter().enumerate() {
                        block[(r, c)] = col[i];
                    }
                }
                block.symmetrized()
            }
            CovarianceForm::Covariance(_) => full.covariance_matrix().principal_submatrix(&pos),
        };
        let factor = cholesky(&block, DEFAULT_MAX_JITTER)?;
        let (mean, complement_values) = split_map(map, mask)?;
        Ok(Self {
            mean,
            covariance: CovarianceForm::Covariance(factor),
            mask: mask.clone(),
            complement_values,
            prior_precision: full.prior_precision,
            noise_variance: full.noise_variance,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Explicit covariance `H̃_S⁻¹`.
    pub fn covariance_matrix(&self) -> DenseMatrix {
        match &self.covariance {
            CovarianceForm::Precision(f) => f.inverse(),
            CovarianceForm::Covariance(f) => f.reconstruct(),
        }
    }

    pub fn marginal_variances(&self) -> Vec<f64> {
        match &self.covariance {
            CovarianceForm::Precision(f) => f.inverse_diagonal(),
            CovarianceForm::Covariance(f) => f.reconstruct().diagonal(),
        }
    }

    /// Rows of a matrix `A` with `Aᵀ A = J Σ Jᵀ` for `J` given row-wise
    /// (each row of `jac` has `dim()` entries).
    pub(crate) fn whiten(&self, jac: &DenseMatrix) -> Result<DenseMatrix> {
        if jac.cols() != self.dim() {
            return Err(Error::IndexMapMismatch);
        }
        match &self.covariance {
            // L⁻¹ Jᵀ: (L⁻¹Jᵀ)ᵀ(L⁻¹Jᵀ) = J (LLᵀ)⁻¹ Jᵀ.
            CovarianceForm::Precision(f) => f.forward_solve_matrix(&jac.transpose()),
            // Cᵀ Jᵀ: J C Cᵀ Jᵀ.
            CovarianceForm::Covariance(f) => f.lower().transpose().matmul(&jac.transpose()),
        }
    }

    /// Full eligible-parameter vector: posterior mean on the mask, MAP values
    /// elsewhere.
    pub fn embed(&self, subnet_values: &[f64]) -> Result<Vec<f64>> {
        if subnet_values.len() != self.dim() {
            return Err(Error::dim("posterior embedding", self.dim(), subnet_values.len()));
        }
        let mut out = vec![0.0; self.mask.total()];
        for (&i, &v) in self.mask.selected().iter().zip(subnet_values) {
            out[i] = v;
        }
        for (i, &v) in self.mask.complement().iter().zip(&self.complement_values) {
            out[*i] = v;
        }
        Ok(out)
    }

    /// One draw `w_S ~ N(ŵ_S, Σ_S)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let z: Vec<f64> = (0..self.dim()).map(|_| rng.sample(StandardNormal)).collect();
        let delta = match &self.covariance {
            CovarianceForm::Precision(f) => {
                let mut x = z;
                f.backward_substitute(&mut x).expect("dimension matches");
                x
            }
            CovarianceForm::Covariance(f) => f.lower().matvec(&z).expect("dimension matches"),
        };
        self.mean.iter().zip(delta).map(|(m, d)| m + d).collect()
    }

    pub fn to_document(&self) -> PosteriorDocument {
        let cov = self.covariance_matrix();
        let n = self.dim();
        let mut lower = Vec::with_capacity(n * (n + 1) / 2);
        for i in 0..n {
            lower.extend_from_slice(&cov.row(i)[..=i]);
        }
        let (form, factor) = match &self.covariance {
            CovarianceForm::Precision(f) => ("precision", f),
            CovarianceForm::Covariance(f) => ("covariance", f),
        };
        let mut factor_lower = Vec::with_capacity(n * (n + 1) / 2);
        for i in 0..n {
            factor_lower.extend_from_slice(&factor.lower().row(i)[..=i]);
        }
        PosteriorDocument {
            total: self.mask.total(),
            mask_indices: self.mask.selected().to_vec(),
            mean: self.mean.clone(),
            covariance_lower: lower,
            prior_precision: self.prior_precision,
            sigma2: self.noise_variance,
            factor_form: form.to_string(),
            factor_lower,
            jitter_applied: factor.jitter_applied(),
        }
    }

    /// Rebuilds a posterior from its document and the MAP estimate it was
    /// inferred from (which supplies the complement values).
    pub fn from_document(doc: &PosteriorDocument, map: &MapEstimate) -> Result<Self> {
        let mask = SubnetworkMask::new(doc.mask_indices.clone(), doc.total)?;
        let n = mask.len();
        let tri = n * (n + 1) / 2;
        if doc.mean.len() != n || doc.factor_lower.len() != tri || doc.covariance_lower.len() != tri {
            return Err(Error::dim("posterior document", n, doc.mean.len()));
        }
        let mut lower = DenseMatrix::zeros(n, n);
        let mut it = doc.factor_lower.iter();
        for i in 0..n {
            for j in 0..=i {
                lower[(i, j)] = *it.next().expect("length checked");
            }
        }
        let factor = CholeskyFactor::from_lower(lower)?;
        let covariance = match doc.factor_form.as_str() {
            "precision" => CovarianceForm::Precision(factor),
            "covariance" => CovarianceForm::Covariance(factor),
            other => return Err(Error::InvalidConfig(format!("unknown factor form {other:?}"))),
        };
        let (_, complement_values) = split_map(map, &mask)?;
        Ok(Self {
            mean: doc.mean.clone(),
            covariance,
            mask,
            complement_values,
            prior_precision: doc.prior_precision,
            noise_variance: doc.sigma2,
        })
    }
}

/// Serialized posterior. `covariance_lower` is the row-major lower triangle
/// of `H̃_S⁻¹`; `factor_lower` is the Cholesky factor actually used, so a
/// reload reproduces predictions bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDocument {
    pub total: usize,
    pub mask_indices: Vec<usize>,
    pub mean: Vec<f64>,
    pub covariance_lower: Vec<f64>,
    pub prior_precision: f64,
    pub sigma2: Option<f64>,
    pub factor_form: String,
    pub factor_lower: Vec<f64>,
    pub jitter_applied: f64,
}

/// Factorized Gaussian over all eligible parameters with variances
/// `1/diag(H̃)` (diagonal Laplace).
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalPosterior {
    pub variances: Vec<f64>,
    pub index_map: Vec<usize>,
    pub prior_precision: f64,
    pub noise_variance: Option<f64>,
}

impl DiagonalPosterior {
    pub fn from_ggn(ggn: &GgnMatrix, map: &MapEstimate) -> Result<Self> {
        Ok(Self {
            variances: diag_marginal_variances(ggn)?,
            index_map: ggn.index_map().to_vec(),
            prior_precision: ggn.prior_precision(),
            noise_variance: map.noise_variance(),
        })
    }
}
