//! Dense linear algebra used by the inference code.
//!
//! Everything is `f64` and row-major. Matrices here are small enough (a few
//! thousand rows at most) that cubic algorithms are fine, but the inner loops
//! are written over contiguous rows so the compiler can vectorize them.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative asymmetry accepted by [`cholesky`] before it refuses the input.
pub const SYMMETRY_TOLERANCE: f64 = 1e-8;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_diag(&vec![1.0; n])
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim("DenseMatrix::from_vec", rows * cols, data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::dim("DenseMatrix::from_rows", cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Column vector (n × 1).
    pub fn column(values: &[f64]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn trace(&self) -> f64 {
        self.diagonal().iter().sum()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != other.rows {
            return Err(Error::dim("DenseMatrix::matmul", self.cols, other.rows));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a != 0.0 {
                    axpy(a, other.row(k), out_row);
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if self.cols != v.len() {
            return Err(Error::dim("DenseMatrix::matvec", self.cols, v.len()));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    pub fn add(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::dim(
                "DenseMatrix::add",
                self.rows * self.cols,
                other.rows * other.cols,
            ));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn sub(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        self.add(&other.scaled(-1.0))
    }

    pub fn scaled(&self, factor: f64) -> DenseMatrix {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    /// Adds `value` to every diagonal entry.
    pub fn add_to_diagonal(&mut self, value: f64) {
        for i in 0..self.rows.min(self.cols) {
            self[(i, i)] += value;
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut worst = 0.0_f64;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    /// Returns (A + Aᵀ) / 2.
    pub fn symmetrized(&self) -> DenseMatrix {
        let mut out = self.clone();
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                let avg = 0.5 * (self[(i, j)] + self[(j, i)]);
                out[(i, j)] = avg;
                out[(j, i)] = avg;
            }
        }
        out
    }

    /// Principal submatrix on `indices` (rows and columns).
    pub fn principal_submatrix(&self, indices: &[usize]) -> DenseMatrix {
        let k = indices.len();
        let mut out = Self::zeros(k, k);
        for (a, &i) in indices.iter().enumerate() {
            let row = self.row(i);
            for (b, &j) in indices.iter().enumerate() {
                out[(a, b)] = row[j];
            }
        }
        out
    }

    /// Columns `indices` of every row.
    pub fn select_columns(&self, indices: &[usize]) -> DenseMatrix {
        let mut out = Self::zeros(self.rows, indices.len());
        for i in 0..self.rows {
            let src = self.row(i);
            for (b, &j) in indices.iter().enumerate() {
                out[(i, b)] = src[j];
            }
        }
        out
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// Dot product with four independent accumulators so the loop vectorizes.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0_f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += alpha * x`.
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Pairwise (cascade) summation.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const BASE: usize = 32;
    if values.len() <= BASE {
        values.iter().sum()
    } else {
        let mid = values.len() / 2;
        pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `log Σ exp(l_i)`.
pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
}

/// Lower Cholesky factor `L` with `L·Lᵀ = A + jitter·I`.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor {
    lower: DenseMatrix,
    jitter_applied: f64,
}

impl CholeskyFactor {
    pub fn lower(&self) -> &DenseMatrix {
        &self.lower
    }

    pub fn jitter_applied(&self) -> f64 {
        self.jitter_applied
    }

    pub fn dim(&self) -> usize {
        self.lower.rows
    }

    /// Builds a factor from an existing lower-triangular matrix.
    pub fn from_lower(lower: DenseMatrix) -> Result<Self> {
        if !lower.is_square() {
            return Err(Error::dim("CholeskyFactor::from_lower", lower.rows, lower.cols));
        }
        for i in 0..lower.rows {
            let d = lower[(i, i)];
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::NonPositiveDiagonal { index: i, value: d });
            }
            if lower.row(i)[i + 1..].iter().any(|&v| v != 0.0) {
                return Err(Error::InvalidConfig("factor is not lower triangular".into()));
            }
        }
        Ok(Self {
            lower,
            jitter_applied: 0.0,
        })
    }

    /// Solves `L·y = b` in place.
    pub fn forward_substitute(&self, b: &mut [f64]) -> Result<()> {
        let n = self.dim();
        if b.len() != n {
            return Err(Error::dim("CholeskyFactor::forward_substitute", n, b.len()));
        }
        for i in 0..n {
            let row = self.lower.row(i);
            b[i] = (b[i] - dot(&row[..i], &b[..i])) / row[i];
        }
        Ok(())
    }

    /// Solves `Lᵀ·x = y` in place.
    pub fn backward_substitute(&self, y: &mut [f64]) -> Result<()> {
        let n = self.dim();
        if y.len() != n {
            return Err(Error::dim("CholeskyFactor::backward_substitute", n, y.len()));
        }
        for i in (0..n).rev() {
            let row = self.lower.row(i);
            y[i] /= row[i];
            let xi = y[i];
            axpy(-xi, &row[..i], &mut y[..i]);
        }
        Ok(())
    }

    pub fn solve_vec(&self, b: &[f64]) -> Result<Vec<f64>> {
        let mut x = b.to_vec();
        self.forward_substitute(&mut x)?;
        self.backward_substitute(&mut x)?;
        Ok(x)
    }

    /// `L⁻¹·A` applied to every column of `b` (rows of the result align with `b`).
    pub fn forward_solve_matrix(&self, b: &DenseMatrix) -> Result<DenseMatrix> {
        let n = self.dim();
        if b.rows != n {
            return Err(Error::dim("CholeskyFactor::forward_solve_matrix", n, b.rows));
        }
        let k = b.cols;
        let mut x = b.clone();
        for i in 0..n {
            let lrow = self.lower.row(i);
            let (done, rest) = x.data.split_at_mut(i * k);
            let xi = &mut rest[..k];
            for (j, &lij) in lrow[..i].iter().enumerate() {
                if lij != 0.0 {
                    axpy(-lij, &done[j * k..(j + 1) * k], xi);
                }
            }
            let inv = 1.0 / lrow[i];
            xi.iter_mut().for_each(|v| *v *= inv);
        }
        Ok(x)
    }

    /// Inverse of `L` (lower triangular), built row by row.
    pub fn inverse_lower(&self) -> DenseMatrix {
        let n = self.dim();
        let mut inv = DenseMatrix::zeros(n, n);
        let mut acc = vec![0.0; n];
        for i in 0..n {
            // Row i of L⁻¹ solves r·L = e_i; process columns from i downwards.
            acc[..=i].iter_mut().for_each(|v| *v = 0.0);
            acc[i] = 1.0;
            for k in (0..=i).rev() {
                let lrow = self.lower.row(k);
                let rk = acc[k] / lrow[k];
                acc[k] = rk;
                if rk != 0.0 {
                    axpy(-rk, &lrow[..k], &mut acc[..k]);
                }
            }
            inv.row_mut(i)[..=i].copy_from_slice(&acc[..=i]);
        }
        inv
    }

    /// Explicit inverse of the factored matrix.
    pub fn inverse(&self) -> DenseMatrix {
        let n = self.dim();
        let linv = self.inverse_lower();
        let mut out = DenseMatrix::zeros(n, n);
        // A⁻¹ = L⁻ᵀ L⁻¹ = Σ_k r_kᵀ r_k over rows r_k of L⁻¹.
        for k in 0..n {
            let r = &linv.row(k)[..=k];
            for (i, &ri) in r.iter().enumerate() {
                if ri != 0.0 {
                    axpy(ri, r, &mut out.row_mut(i)[..=k]);
                }
            }
        }
        out
    }

    /// Diagonal of the inverse of the factored matrix.
    pub fn inverse_diagonal(&self) -> Vec<f64> {
        let n = self.dim();
        let linv = self.inverse_lower();
        let mut diag = vec![0.0; n];
        for k in 0..n {
            for (d, v) in diag.iter_mut().zip(&linv.row(k)[..=k]) {
                *d += v * v;
            }
        }
        diag
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.lower.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// Reconstructs `L·Lᵀ`.
    pub fn reconstruct(&self) -> DenseMatrix {
        let n = self.dim();
        let mut out = DenseMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = dot(&self.lower.row(i)[..=j], &self.lower.row(j)[..=j]);
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        out
    }
}

fn try_factor(m: &DenseMatrix, jitter: f64) -> Option<DenseMatrix> {
    let n = m.rows;
    let mut l = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let s = m[(i, j)] + if i == j { jitter } else { 0.0 };
            let (li, lj) = if i == j {
                let r = l.row(i);
                (r, r)
            } else {
                (l.row(i), l.row(j))
            };
            let s = s - dot(&li[..j], &lj[..j]);
            if i == j {
                if s.is_nan() || s <= 0.0 || s.is_infinite() {
                    return None;
                }
                l[(i, i)] = s.sqrt();
            } else {
                l[(i, j)] = s / l[(j, j)];
            }
        }
    }
    Some(l)
}

/// Cholesky factorization with escalating diagonal jitter.
///
/// The input is symmetrized first. When the plain factorization fails, jitter
/// starts at `1e-10 · mean(diag)` and grows by ×10 until it would exceed
/// `max_jitter`.
pub fn cholesky(m: &DenseMatrix, max_jitter: f64) -> Result<CholeskyFactor> {
    if !m.is_square() {
        return Err(Error::dim("cholesky", m.rows, m.cols));
    }
    let scale = m.max_abs().max(1.0);
    let asym = m.max_asymmetry();
    if asym > SYMMETRY_TOLERANCE * scale {
        return Err(Error::NotSymmetric {
            max_asymmetry: asym,
        });
    }
    let sym = m.symmetrized();
    if let Some(lower) = try_factor(&sym, 0.0) {
        return Ok(CholeskyFactor {
            lower,
            jitter_applied: 0.0,
        });
    }
    let n = m.rows.max(1) as f64;
    let mean_diag = sym.trace() / n;
    let mut jitter = 1e-10 * if mean_diag > 0.0 { mean_diag } else { 1.0 };
    let mut attempted = 0.0;
    while jitter <= max_jitter {
        attempted = jitter;
        if let Some(lower) = try_factor(&sym, jitter) {
            return Ok(CholeskyFactor {
                lower,
                jitter_applied: jitter,
            });
        }
        jitter *= 10.0;
    }
    Err(Error::NotPositiveDefinite {
        attempted_jitter: attempted,
    })
}

/// Solves `(L·Lᵀ)·X = B`.
pub fn solve(factor: &CholeskyFactor, b: &DenseMatrix) -> Result<DenseMatrix> {
    let n = factor.dim();
    if b.rows != n {
        return Err(Error::dim("solve", n, b.rows));
    }
    let mut y = factor.forward_solve_matrix(b)?;
    let k = y.cols;
    for i in (0..n).rev() {
        let lrow = factor.lower.row(i);
        let (head, rest) = y.data.split_at_mut(i * k);
        let yi = &mut rest[..k];
        let inv = 1.0 / lrow[i];
        yi.iter_mut().for_each(|v| *v *= inv);
        for (j, &lij) in lrow[..i].iter().enumerate() {
            if lij != 0.0 {
                axpy(-lij, yi, &mut head[j * k..(j + 1) * k]);
            }
        }
    }
    Ok(y)
}

/// `vᵀ A⁻¹ v` for the factored matrix `A`.
pub fn quad_form(factor: &CholeskyFactor, v: &[f64]) -> Result<f64> {
    let mut y = v.to_vec();
    factor.forward_substitute(&mut y)?;
    Ok(dot(&y, &y))
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues and a matrix whose columns are the eigenvectors.
pub fn symmetric_eigen(m: &DenseMatrix) -> Result<(Vec<f64>, DenseMatrix)> {
    if !m.is_square() {
        return Err(Error::dim("symmetric_eigen", m.rows, m.cols));
    }
    let n = m.rows;
    let mut a = m.symmetrized();
    let mut v = DenseMatrix::identity(n);
    let total = a.frobenius_norm().powi(2);
    if total == 0.0 {
        return Ok((vec![0.0; n], v));
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[(p, q)] * a[(p, q)];
            }
        }
        if off <= 1e-30 * total {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    Ok((a.diagonal(), v))
}

/// Symmetric square root of a PSD matrix via its eigendecomposition.
///
/// Small negative eigenvalues (down to `-1e-6·‖m‖_F`) are treated as zero.
pub fn matrix_sqrt_psd(m: &DenseMatrix) -> Result<DenseMatrix> {
    if !m.is_square() {
        return Err(Error::dim("matrix_sqrt_psd", m.rows, m.cols));
    }
    let scale = m.max_abs().max(1.0);
    let asym = m.max_asymmetry();
    if asym > SYMMETRY_TOLERANCE * scale {
        return Err(Error::NotSymmetric {
            max_asymmetry: asym,
        });
    }
    let n = m.rows;
    let norm = m.frobenius_norm();
    let (values, vectors) = symmetric_eigen(m)?;
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    if n > 0 && min < -1e-6 * norm {
        return Err(Error::NotPsd {
            min_eigenvalue: min,
        });
    }
    let roots: Vec<f64> = values.iter().map(|&l| l.max(0.0).sqrt()).collect();
    let mut out = DenseMatrix::zeros(n, n);
    // B = V diag(√λ) Vᵀ, accumulated on the upper triangle.
    let vt = vectors.transpose();
    for (k, &r) in roots.iter().enumerate() {
        if r == 0.0 {
            continue;
        }
        let vk = vt.row(k);
        for i in 0..n {
            let coef = r * vk[i];
            if coef != 0.0 {
                axpy(coef, &vk[i..], &mut out.row_mut(i)[i..]);
            }
        }
    }
    for i in 0..n {
        for j in 0..i {
            out[(i, j)] = out[(j, i)];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, seed: u64) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = DenseMatrix::from_vec(
            n,
            n,
            (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let mut a = b.matmul(&b.transpose()).unwrap();
        a.add_to_diagonal(n as f64 * 0.1);
        a
    }

    fn rel_err(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
        a.sub(b).unwrap().frobenius_norm() / b.frobenius_norm().max(1e-300)
    }

    #[test]
    fn cholesky_scalar() {
        let f = cholesky(&DenseMatrix::from_diag(&[4.0]), 1e-6).unwrap();
        assert_eq!(f.lower()[(0, 0)], 2.0);
        assert_eq!(f.jitter_applied(), 0.0);
    }

    #[test]
    fn cholesky_identity() {
        let f = cholesky(&DenseMatrix::identity(3), 1e-6).unwrap();
        assert_eq!(f.lower(), &DenseMatrix::identity(3));
        assert_eq!(f.jitter_applied(), 0.0);
    }

    #[test]
    fn cholesky_two_by_two_reconstructs() {
        let m = DenseMatrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let f = cholesky(&m, 1e-6).unwrap();
        let l = f.lower();
        assert_eq!(l[(0, 1)], 0.0);
        let back = l.matmul(&l.transpose()).unwrap();
        assert!(back.sub(&m).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn cholesky_applies_jitter_to_singular_psd() {
        // Rank-one PSD matrix: plain factorization fails at the second pivot.
        let m = DenseMatrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let f = cholesky(&m, 1e-3).unwrap();
        assert!(f.jitter_applied() > 0.0);
        assert!(f.jitter_applied() <= 1e-3);
        let back = f.reconstruct();
        assert!((back[(1, 1)] - 1.0 - f.jitter_applied()).abs() < 1e-12);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let m = DenseMatrix::from_diag(&[1.0, -1.0]);
        assert!(matches!(
            cholesky(&m, 1e-3),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn cholesky_rejects_asymmetric_and_rectangular() {
        let m = DenseMatrix::from_rows(&[vec![2.0, 1.0], vec![0.0, 2.0]]).unwrap();
        assert!(matches!(cholesky(&m, 1e-6), Err(Error::NotSymmetric { .. })));
        assert!(matches!(
            cholesky(&DenseMatrix::zeros(2, 3), 1e-6),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn solve_identity_and_scalar() {
        let f = cholesky(&DenseMatrix::identity(3), 0.0).unwrap();
        let b = DenseMatrix::from_rows(&[vec![1.0, -2.0], vec![3.0, 0.5], vec![7.0, 9.0]]).unwrap();
        assert_eq!(solve(&f, &b).unwrap(), b);

        let f = cholesky(&DenseMatrix::from_diag(&[4.0]), 0.0).unwrap();
        let x = solve(&f, &DenseMatrix::column(&[8.0])).unwrap();
        assert_eq!(x.as_slice(), &[2.0]);
    }

    #[test]
    fn solve_recovers_known_solution() {
        let a = random_spd(5, 11);
        let x0 = DenseMatrix::column(&[1.0, -2.0, 0.5, 3.0, -0.25]);
        let b = a.matmul(&x0).unwrap();
        let f = cholesky(&a, 1e-6).unwrap();
        let x = solve(&f, &b).unwrap();
        assert!(x.sub(&x0).unwrap().max_abs() < 1e-8);
        let resid = a.matmul(&x).unwrap().sub(&b).unwrap().frobenius_norm();
        assert!(resid <= 1e-8 * b.frobenius_norm());
    }

    #[test]
    fn solve_dimension_mismatch() {
        let f = cholesky(&DenseMatrix::identity(3), 0.0).unwrap();
        assert!(solve(&f, &DenseMatrix::zeros(2, 1)).is_err());
        assert!(quad_form(&f, &[1.0]).is_err());
    }

    #[test]
    fn quad_form_cases() {
        let f = cholesky(&DenseMatrix::identity(2), 0.0).unwrap();
        assert_eq!(quad_form(&f, &[3.0, 4.0]).unwrap(), 25.0);
        let f = cholesky(&DenseMatrix::from_diag(&[2.0]), 0.0).unwrap();
        assert!((quad_form(&f, &[2.0]).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn quad_form_matches_explicit_inverse() {
        let a = random_spd(6, 3);
        let f = cholesky(&a, 0.0).unwrap();
        let inv = solve(&f, &DenseMatrix::identity(6)).unwrap();
        let v = [0.3, -1.0, 2.0, 0.0, 0.7, -0.2];
        let explicit = dot(&v, &inv.matvec(&v).unwrap());
        let q = quad_form(&f, &v).unwrap();
        assert!((q - explicit).abs() <= 1e-8 * explicit.abs().max(1.0));
    }

    #[test]
    fn inverse_routes_agree() {
        for n in [1, 2, 7, 20] {
            let a = random_spd(n, n as u64);
            let f = cholesky(&a, 0.0).unwrap();
            let by_solve = solve(&f, &DenseMatrix::identity(n)).unwrap();
            let explicit = f.inverse();
            assert!(rel_err(&explicit, &by_solve) < 1e-10);
            let diag = f.inverse_diagonal();
            for i in 0..n {
                assert!((diag[i] - by_solve[(i, i)]).abs() < 1e-10 * by_solve[(i, i)]);
            }
            let prod = a.matmul(&explicit).unwrap();
            assert!(rel_err(&prod, &DenseMatrix::identity(n)) < 1e-8);
        }
    }

    #[test]
    fn log_det_of_diagonal() {
        let f = cholesky(&DenseMatrix::from_diag(&[2.0, 3.0]), 0.0).unwrap();
        assert!((f.log_det() - 6.0_f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn sqrt_identity_and_diagonal() {
        let i3 = DenseMatrix::identity(3);
        assert!(matrix_sqrt_psd(&i3).unwrap().sub(&i3).unwrap().max_abs() < 1e-14);
        let r = matrix_sqrt_psd(&DenseMatrix::from_diag(&[4.0, 9.0])).unwrap();
        assert!(r.sub(&DenseMatrix::from_diag(&[2.0, 3.0])).unwrap().max_abs() < 1e-14);
    }

    #[test]
    fn sqrt_squares_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // Rank-deficient PSD: B·Bᵀ with B 4×2.
        let b = DenseMatrix::from_vec(4, 2, (0..8).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap();
        for m in [random_spd(4, 9), b.matmul(&b.transpose()).unwrap()] {
            let r = matrix_sqrt_psd(&m).unwrap();
            assert!(r.max_asymmetry() <= 1e-10);
            assert!(rel_err(&r.matmul(&r).unwrap(), &m) < 1e-8);
        }
    }

    #[test]
    fn sqrt_rejects_indefinite() {
        let m = DenseMatrix::from_diag(&[1.0, -0.5]);
        assert!(matches!(matrix_sqrt_psd(&m), Err(Error::NotPsd { .. })));
    }

    #[test]
    fn pairwise_sum_matches_naive() {
        let v: Vec<f64> = (0..1000).map(|i| (i as f64).sin()).collect();
        assert!((pairwise_sum(&v) - v.iter().sum::<f64>()).abs() < 1e-10);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn inverse_via_solve_matches_explicit(n in 1usize..=20, seed in any::<u64>()) {
                let a = random_spd(n, seed);
                let f = cholesky(&a, 0.0).unwrap();
                let inv = solve(&f, &DenseMatrix::identity(n)).unwrap();
                // A·A⁻¹ = I
                let prod = a.matmul(&inv).unwrap();
                prop_assert!(rel_err(&prod, &DenseMatrix::identity(n)) < 1e-8);
                prop_assert!(rel_err(&f.inverse(), &inv) < 1e-8);
            }

            #[test]
            fn quad_form_nonnegative(n in 1usize..=10, seed in any::<u64>(), v in prop::collection::vec(-10.0f64..10.0, 10)) {
                let f = cholesky(&random_spd(n, seed), 0.0).unwrap();
                prop_assert!(quad_form(&f, &v[..n]).unwrap() >= 0.0);
            }

            #[test]
            fn sqrt_is_symmetric_root(n in 1usize..=8, seed in any::<u64>()) {
                let m = random_spd(n, seed);
                let r = matrix_sqrt_psd(&m).unwrap();
                prop_assert!(r.max_asymmetry() <= 1e-10);
                prop_assert!(rel_err(&r.matmul(&r).unwrap(), &m) < 1e-8);
            }
        }
    }
}
