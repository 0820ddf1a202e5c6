#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::Rng;
use subnet_laplace::data::Task;
use subnet_laplace::linalg::DenseMatrix;
use subnet_laplace::net::{MlpArchitecture, WeightVector};
use subnet_laplace::rng;
use subnet_laplace::train::MapEstimate;

pub fn map_from(arch: MlpArchitecture, weights: Vec<f64>, task: Task, log_var: Option<f64>) -> MapEstimate {
    MapEstimate {
        weights: WeightVector::new(&arch, weights).unwrap(),
        arch,
        noise_log_variance: log_var,
        task,
        seed: 0,
        train_loss_history: Vec::new(),
        val_metric_history: Vec::new(),
        best_epoch: 0,
    }
}

pub fn random_map(arch: &MlpArchitecture, seed: u64, task: Task, log_var: Option<f64>) -> MapEstimate {
    let w = arch.init_weights(&mut rng::stream(seed, "tests/init"));
    map_from(arch.clone(), w.values().to_vec(), task, log_var)
}

pub fn to_na(m: &DenseMatrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

pub fn from_na(m: &DMatrix<f64>) -> DenseMatrix {
    let rows: Vec<Vec<f64>> = (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect();
    DenseMatrix::from_rows(&rows).unwrap()
}

/// Random correlated SPD matrix `B Bᵀ + ridge·I` with `B` of width `rank`.
pub fn random_spd<R: Rng>(rng: &mut R, n: usize, rank: usize, ridge: f64) -> DMatrix<f64> {
    let b = DMatrix::from_fn(n, rank, |_, _| rng.random_range(-1.0..1.0));
    &b * b.transpose() + DMatrix::identity(n, n) * ridge
}

pub fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> DenseMatrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    DenseMatrix::from_vec(rows, cols, data).unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}
