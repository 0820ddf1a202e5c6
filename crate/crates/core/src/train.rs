//! MAP training by mini-batch SGD with momentum and weight decay.
//!
//! The per-step objective is the mean negative log-likelihood over the batch
//! plus `(weight_decay / 2)·‖w‖²`. Scaled by the number of training points
//! `N`, the full-batch objective is the negative log-posterior under a
//! `N(0, (N·weight_decay)⁻¹ I)` prior, up to a constant. For regression the
//! homoscedastic noise variance is learned jointly as `log σ²` (no decay).

use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Targets, Task};
use crate::error::{Error, Result};
use crate::linalg::{log_sum_exp, softmax};
use crate::net::{backward_into, forward_into, Checkpoint, MlpArchitecture, Scratch, WeightVector};
use crate::rng;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub task: Task,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 512,
            max_epochs: 2000,
            patience: 500,
            seed: 0,
            task: Task::Regression,
        }
    }
}

impl TrainConfig {
    /// Epoch budget used for large datasets (tens of thousands of points).
    pub fn large_dataset() -> Self {
        Self {
            max_epochs: 500,
            patience: 125,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be at least 1");
        }
        if self.patience > self.max_epochs {
            return bad("patience must not exceed max_epochs");
        }
        Ok(())
    }

    fn early_stopping(&self) -> bool {
        self.patience < self.max_epochs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapEstimate {
    pub arch: MlpArchitecture,
    pub weights: WeightVector,
    /// `log σ²` of the Gaussian likelihood (regression only).
    pub noise_log_variance: Option<f64>,
    pub task: Task,
    pub seed: u64,
    pub train_loss_history: Vec<f64>,
    pub val_metric_history: Vec<f64>,
    /// Epoch (1-based) whose parameters were kept.
    pub best_epoch: usize,
}

impl MapEstimate {
    pub fn noise_variance(&self) -> Option<f64> {
        self.noise_log_variance.map(f64::exp)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            architecture: self.arch.clone(),
            weights: self.weights.values().to_vec(),
            noise_log_variance: self.noise_log_variance,
            seed: self.seed,
            training_meta: serde_json::json!({
                "task": self.task,
                "epochs_run": self.train_loss_history.len(),
                "best_epoch": self.best_epoch,
                "final_train_loss": self.train_loss_history.last(),
                "best_val_loss": self.val_metric_history.iter().copied().fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.min(v)))),
            }),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let weights = WeightVector::new(&ck.architecture, ck.weights.clone())?;
        let task = match ck.training_meta.get("task") {
            Some(t) => serde_json::from_value(t.clone())?,
            None if ck.noise_log_variance.is_some() => Task::Regression,
            None => Task::Classification,
        };
        if task == Task::Regression && ck.noise_log_variance.is_none() {
            return Err(Error::InvalidConfig("regression checkpoint lacks a noise variance".into()));
        }
        let best_epoch = ck
            .training_meta
            .get("best_epoch")
            .and_then(|v| v.as_u64())
            .unwrap_or(0) as usize;
        Ok(Self {
            arch: ck.architecture.clone(),
            weights,
            noise_log_variance: ck.noise_log_variance,
            task,
            seed: ck.seed,
            train_loss_history: Vec::new(),
            val_metric_history: Vec::new(),
            best_epoch,
        })
    }

    /// Training curve as `epoch,train_loss,val_loss` (val empty when absent).
    pub fn write_curve_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "epoch,train_loss,val_loss")?;
        for (i, t) in self.train_loss_history.iter().enumerate() {
            match self.val_metric_history.get(i) {
                Some(v) => writeln!(out, "{},{},{}", i + 1, t, v)?,
                None => writeln!(out, "{},{},", i + 1, t)?,
            }
        }
        Ok(())
    }
}

/// Negative log-likelihood of one example and its gradient w.r.t. the
/// network output (written into `dout`). Also returns `∂/∂log σ²`.
fn example_loss(
    task: Task,
    output: &[f64],
    targets: &Targets,
    i: usize,
    log_var: f64,
    dout: &mut [f64],
) -> (f64, f64) {
    match (task, targets) {
        (Task::Regression, Targets::Regression(t)) => {
            let inv_var = (-log_var).exp();
            let y = t.row(i);
            let mut sq = 0.0;
            for ((d, f), y) in dout.iter_mut().zip(output).zip(y) {
                let r = f - y;
                sq += r * r;
                *d = r * inv_var;
            }
            let o = output.len() as f64;
            let loss = 0.5 * (o * (LN_2PI + log_var) + sq * inv_var);
            (loss, 0.5 * (o - sq * inv_var))
        }
        (Task::Classification, Targets::Classification { labels, .. }) => {
            let p = softmax(output);
            let label = labels[i];
            for (k, (d, pk)) in dout.iter_mut().zip(&p).enumerate() {
                *d = pk - if k == label { 1.0 } else { 0.0 };
            }
            (log_sum_exp(output) - output[label], 0.0)
        }
        _ => unreachable!("task checked against targets before training"),
    }
}

/// Mean negative log-likelihood of `data` under the network (no prior).
pub fn mean_nll(
    arch: &MlpArchitecture,
    w: &WeightVector,
    log_var: f64,
    task: Task,
    data: &Dataset,
) -> f64 {
    let mut scratch = Scratch::new(arch);
    let mut dout = vec![0.0; arch.output_dim];
    let mut total = 0.0;
    for i in 0..data.len() {
        let out = forward_into(arch, w, data.input(i), &mut scratch);
        total += example_loss(task, out, &data.targets, i, log_var, &mut dout).0;
    }
    total / data.len() as f64
}

/// Full-batch training objective and its gradient.
///
/// Returns `(J, ∂J/∂w, ∂J/∂log σ²)` with
/// `J = mean NLL + (weight_decay/2)·‖w‖²`.
pub fn objective_and_gradient(
    arch: &MlpArchitecture,
    w: &WeightVector,
    log_var: f64,
    cfg: &TrainConfig,
    data: &Dataset,
) -> (f64, Vec<f64>, f64) {
    let n = data.len() as f64;
    let mut scratch = Scratch::new(arch);
    let mut dout = vec![0.0; arch.output_dim];
    let mut grad = vec![0.0; arch.n_params()];
    let mut nll = 0.0;
    let mut g_logvar = 0.0;
    for i in 0..data.len() {
        let x = data.input(i);
        let out = forward_into(arch, w, x, &mut scratch);
        let (l, gl) = example_loss(cfg.task, out, &data.targets, i, log_var, &mut dout);
        nll += l;
        g_logvar += gl;
        dout.iter_mut().for_each(|d| *d /= n);
        backward_into(arch, w, x, &mut scratch, &dout, &mut grad);
    }
    let sq: f64 = w.values().iter().map(|v| v * v).sum();
    for (g, v) in grad.iter_mut().zip(w.values()) {
        *g += cfg.weight_decay * v;
    }
    (nll / n + 0.5 * cfg.weight_decay * sq, grad, g_logvar / n)
}

fn check_task(arch: &MlpArchitecture, data: &Dataset, task: Task) -> Result<()> {
    if data.task() != task {
        return Err(Error::TaskMismatch {
            expected: match task {
                Task::Regression => "regression",
                Task::Classification => "classification",
            },
        });
    }
    if data.input_dim() != arch.input_dim {
        return Err(Error::dim("training inputs", arch.input_dim, data.input_dim()));
    }
    if data.output_dim() != arch.output_dim {
        return Err(Error::dim("training targets", arch.output_dim, data.output_dim()));
    }
    Ok(())
}

/// Trains to a MAP estimate, keeping the parameters with the best validation
/// loss. Without a validation set the final parameters are returned.
pub fn train_map(
    arch: &MlpArchitecture,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<MapEstimate> {
    cfg.validate()?;
    arch.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    check_task(arch, train, cfg.task)?;
    let val = match val {
        Some(v) if v.is_empty() => return Err(Error::EmptyValidation),
        Some(v) => {
            check_task(arch, v, cfg.task)?;
            Some(v)
        }
        None if cfg.early_stopping() => return Err(Error::EmptyValidation),
        None => None,
    };
    let regression = cfg.task == Task::Regression;

    let mut w = arch.init_weights(&mut rng::stream(cfg.seed, "train/init"));
    let mut log_var = 0.0;
    let mut velocity = vec![0.0; w.len()];
    let mut velocity_logvar = 0.0;
    let mut grad = vec![0.0; w.len()];
    let mut dout = vec![0.0; arch.output_dim];
    let mut scratch = Scratch::new(arch);
    let mut shuffle = rng::stream(cfg.seed, "train/shuffle");
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut best = (w.clone(), log_var, f64::INFINITY, 0usize);
    let mut train_hist = Vec::new();
    let mut val_hist = Vec::new();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / batch.len() as f64;
            let mut g_logvar = 0.0;
            for &i in batch {
                let x = train.input(i);
                let out = forward_into(arch, &w, x, &mut scratch);
                let (l, gl) = example_loss(cfg.task, out, &train.targets, i, log_var, &mut dout);
                epoch_loss += l;
                g_logvar += gl * scale;
                dout.iter_mut().for_each(|d| *d *= scale);
                backward_into(arch, &w, x, &mut scratch, &dout, &mut grad);
            }
            for ((v, g), p) in velocity.iter_mut().zip(&grad).zip(w.values_mut()) {
                *v = cfg.momentum * *v + g + cfg.weight_decay * *p;
                *p -= cfg.learning_rate * *v;
            }
            if regression {
                velocity_logvar = cfg.momentum * velocity_logvar + g_logvar;
                log_var -= cfg.learning_rate * velocity_logvar;
            }
        }
        let epoch_loss = epoch_loss / train.len() as f64;
        if !epoch_loss.is_finite() || !w.is_finite() || !log_var.is_finite() {
            return Err(Error::DivergedTraining { epoch });
        }
        train_hist.push(epoch_loss);

        if let Some(v) = val {
            let vl = mean_nll(arch, &w, log_var, cfg.task, v);
            if !vl.is_finite() {
                return Err(Error::DivergedTraining { epoch });
            }
            val_hist.push(vl);
            if vl < best.2 {
                best = (w.clone(), log_var, vl, epoch);
            } else if cfg.early_stopping() && epoch - best.3 >= cfg.patience {
                break;
            }
        }
    }

    let (weights, log_var, best_epoch) = match val {
        Some(_) => (best.0, best.1, best.3),
        None => (w, log_var, train_hist.len()),
    };
    Ok(MapEstimate {
        arch: arch.clone(),
        weights,
        noise_log_variance: regression.then_some(log_var),
        task: cfg.task,
        seed: cfg.seed,
        train_loss_history: train_hist,
        val_metric_history: val_hist,
        best_epoch,
    })
}

/// Default number of ensemble members.
pub const DEFAULT_ENSEMBLE_SIZE: usize = 5;

/// Independently trained members whose seeds are `cfg.seed + k`; they
/// differ only in initialization and shuffling order.
pub fn train_ensemble(
    arch: &MlpArchitecture,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    n_members: usize,
) -> Result<Vec<MapEstimate>> {
    if n_members == 0 {
        return Err(Error::InvalidSize("an ensemble needs at least one member".into()));
    }
    (0..n_members as u64)
        .map(|k| {
            let member = TrainConfig {
                seed: cfg.seed.wrapping_add(k),
                ..cfg.clone()
            };
            train_map(arch, train, val, &member)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::DenseMatrix;
    use crate::net::grad_params;

    // Deterministic pseudo-noise of amplitude 0.1 keeps σ² away from zero.
    fn line_data(n: usize, slope: f64) -> Dataset {
        let xs: Vec<f64> = (0..n).map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64).collect();
        let ys: Vec<f64> = xs.iter().enumerate().map(|(i, x)| slope * x + 0.1 * (7.3 * i as f64).sin()).collect();
        Dataset::regression(DenseMatrix::column(&xs), DenseMatrix::column(&ys)).unwrap()
    }

    #[test]
    fn defaults_match_reference_hyperparameters() {
        let c = TrainConfig::default();
        assert_eq!(c.learning_rate, 1e-3);
        assert_eq!(c.momentum, 0.9);
        assert_eq!(c.weight_decay, 1e-4);
        assert_eq!(c.batch_size, 512);
        assert_eq!((c.max_epochs, c.patience), (2000, 500));
        let l = TrainConfig::large_dataset();
        assert_eq!((l.max_epochs, l.patience), (500, 125));
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            TrainConfig { learning_rate: 0.0, ..ok.clone() },
            TrainConfig { momentum: 1.0, ..ok.clone() },
            TrainConfig { weight_decay: -1.0, ..ok.clone() },
            TrainConfig { patience: 3000, ..ok.clone() },
            TrainConfig { batch_size: 0, ..ok.clone() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn recovers_noiseless_slope() {
        let data = line_data(64, 2.0);
        // Least-squares slope with intercept, computed directly.
        let xs = data.inputs.as_slice();
        let ys = data.regression_targets().unwrap().as_slice();
        let n = xs.len() as f64;
        let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
        let ls = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
            / xs.iter().map(|x| (x - mx) * (x - mx)).sum::<f64>();
        assert!((ls - 2.0).abs() < 0.05);

        let arch = MlpArchitecture::new(1, vec![], 1).unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            weight_decay: 0.0,
            batch_size: 64,
            max_epochs: 4000,
            patience: 4000,
            ..TrainConfig::default()
        };
        let map = train_map(&arch, &data, None, &cfg).unwrap();
        let slope = map.weights.values()[0];
        assert!((slope - ls).abs() < 1e-2, "slope {slope} vs {ls}");
        let var = map.noise_variance().unwrap();
        assert!(var > 1e-3 && var < 2e-2, "σ² {var}");
    }

    #[test]
    fn constant_targets_are_fit() {
        let xs: Vec<f64> = (0..40).map(|i| i as f64 / 40.0).collect();
        let ys: Vec<f64> = (0..40).map(|i| 1.5 + 0.05 * (3.1 * i as f64).sin()).collect();
        let data = Dataset::regression(DenseMatrix::column(&xs), DenseMatrix::column(&ys)).unwrap();
        let arch = MlpArchitecture::new(1, vec![8], 1).unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            weight_decay: 0.0,
            batch_size: 40,
            max_epochs: 10000,
            patience: 10000,
            ..TrainConfig::default()
        };
        let map = train_map(&arch, &data, None, &cfg).unwrap();
        for &x in &xs {
            let f = crate::net::forward(&arch, &map.weights, &[x]).unwrap()[0];
            assert!((f - 1.5).abs() < 0.05, "f({x}) = {f}");
        }
        let var = map.noise_variance().unwrap();
        assert!(var < 1e-2, "σ² {var}");
    }

    #[test]
    fn objective_is_scaled_negative_log_posterior() {
        // N·∇J equals the gradient of −log p(y|w) − log p(w) with λ = N·wd.
        let data = crate::data::make_toy_1d(6, 0.1, 0).unwrap();
        let arch = MlpArchitecture::new(1, vec![4], 1).unwrap();
        let w = arch.init_weights(&mut rng::stream(1, "t"));
        let log_var = -0.7;
        let cfg = TrainConfig {
            weight_decay: 0.03,
            ..TrainConfig::default()
        };
        let (_, grad, g_lv) = objective_and_gradient(&arch, &w, log_var, &cfg, &data);
        let n = data.len() as f64;
        let lambda = n * cfg.weight_decay;
        let var = log_var.exp();
        let mut expected: Vec<f64> = w.values().iter().map(|v| lambda * v).collect();
        let mut expected_lv = 0.0;
        let y = data.regression_targets().unwrap();
        for i in 0..data.len() {
            let f = crate::net::forward(&arch, &w, data.input(i)).unwrap()[0];
            let r = f - y[(i, 0)];
            let g = grad_params(&arch, &w, data.input(i), &[r / var]).unwrap();
            for (e, gi) in expected.iter_mut().zip(g) {
                *e += gi;
            }
            expected_lv += 0.5 - 0.5 * r * r / var;
        }
        for (a, b) in grad.iter().zip(&expected) {
            assert!((n * a - b).abs() < 1e-10 * b.abs().max(1.0));
        }
        assert!((n * g_lv - expected_lv).abs() < 1e-10);
    }

    #[test]
    fn same_seed_is_bitwise_reproducible() {
        let data = crate::data::make_toy_1d(20, 0.1, 0).unwrap();
        let arch = MlpArchitecture::new(1, vec![10], 1).unwrap();
        let cfg = TrainConfig {
            max_epochs: 50,
            patience: 50,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let a = train_map(&arch, &data, None, &cfg).unwrap();
        let b = train_map(&arch, &data, None, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn early_stopping_keeps_best_validation_epoch() {
        let data = crate::data::make_toy_1d(30, 0.2, 0).unwrap();
        let val = crate::data::make_toy_1d(10, 0.2, 1).unwrap();
        let arch = MlpArchitecture::new(1, vec![16], 1).unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            max_epochs: 300,
            patience: 20,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let map = train_map(&arch, &data, Some(&val), &cfg).unwrap();
        let best = map.val_metric_history.iter().copied().fold(f64::INFINITY, f64::min);
        assert_eq!(map.val_metric_history[map.best_epoch - 1], best);
        let recomputed = mean_nll(&arch, &map.weights, map.noise_log_variance.unwrap(), Task::Regression, &val);
        assert_eq!(recomputed, best);
        assert!(map.val_metric_history.len() - map.best_epoch <= cfg.patience);
    }

    #[test]
    fn input_errors() {
        let arch = MlpArchitecture::new(1, vec![2], 1).unwrap();
        let empty = Dataset::regression(DenseMatrix::zeros(0, 1), DenseMatrix::zeros(0, 1)).unwrap();
        let cfg = TrainConfig {
            patience: 2000,
            ..TrainConfig::default()
        };
        assert!(matches!(train_map(&arch, &empty, None, &cfg), Err(Error::EmptyDataset)));
        let data = line_data(10, 1.0);
        assert!(matches!(
            train_map(&arch, &data, None, &TrainConfig::default()),
            Err(Error::EmptyValidation)
        ));
        let cls = TrainConfig {
            task: Task::Classification,
            ..cfg
        };
        assert!(matches!(train_map(&arch, &data, None, &cls), Err(Error::TaskMismatch { .. })));
    }

    #[test]
    fn divergence_is_reported() {
        // lr·wd far above the stability limit makes the decay term explode.
        let data = line_data(20, 1.0);
        let arch = MlpArchitecture::new(1, vec![4], 1).unwrap();
        let cfg = TrainConfig {
            learning_rate: 100.0,
            weight_decay: 1.0,
            max_epochs: 200,
            patience: 200,
            batch_size: 4,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train_map(&arch, &data, None, &cfg),
            Err(Error::DivergedTraining { .. })
        ));
    }

    #[test]
    fn ensemble_members() {
        let data = crate::data::make_toy_1d(10, 0.1, 0).unwrap();
        let arch = MlpArchitecture::new(1, vec![5], 1).unwrap();
        let cfg = TrainConfig {
            max_epochs: 20,
            patience: 20,
            ..TrainConfig::default()
        };
        let one = train_ensemble(&arch, &data, None, &cfg, 1).unwrap();
        assert_eq!(one[0], train_map(&arch, &data, None, &cfg).unwrap());
        let two = train_ensemble(&arch, &data, None, &cfg, 2).unwrap();
        assert_ne!(two[0].weights, two[1].weights);
        assert!(train_ensemble(&arch, &data, None, &cfg, 0).is_err());
        assert_eq!(DEFAULT_ENSEMBLE_SIZE, 5);
    }

    #[test]
    fn classification_training_reduces_loss() {
        let data = crate::data::make_two_moons(80, 0.1, 0).unwrap();
        let arch = MlpArchitecture::new(2, vec![16], 2).unwrap();
        let cfg = TrainConfig {
            task: Task::Classification,
            learning_rate: 0.05,
            batch_size: 16,
            max_epochs: 200,
            patience: 200,
            ..TrainConfig::default()
        };
        let map = train_map(&arch, &data, None, &cfg).unwrap();
        assert!(map.noise_log_variance.is_none());
        assert!(map.train_loss_history.last().unwrap() < &(0.5 * map.train_loss_history[0]));
    }

    #[test]
    fn checkpoint_and_curve() {
        let data = crate::data::make_toy_1d(10, 0.1, 0).unwrap();
        let arch = MlpArchitecture::new(1, vec![3], 1).unwrap();
        let cfg = TrainConfig {
            max_epochs: 5,
            patience: 5,
            ..TrainConfig::default()
        };
        let map = train_map(&arch, &data, None, &cfg).unwrap();
        let ck = map.to_checkpoint();
        let back = MapEstimate::from_checkpoint(&Checkpoint::from_json(&ck.to_json().unwrap()).unwrap()).unwrap();
        assert_eq!(back.weights, map.weights);
        assert_eq!(back.noise_log_variance, map.noise_log_variance);
        assert_eq!(back.task, Task::Regression);
        let mut buf = Vec::new();
        map.write_curve_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 6);
        assert!(text.starts_with("epoch,train_loss,val_loss\n1,"));
    }
}
