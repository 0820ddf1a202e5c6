//! End-to-end comparisons: train, select, infer, predict, score.

use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, SplitSpec, Task, TOY_GAP};
use crate::error::{Error, Result};
use crate::eval::{self, grid_search_lambda, Metrics, ResultRow, DEFAULT_LAMBDA_GRID};
use crate::laplace::{build_posterior, compute_ggn, rescale_prior, DiagonalPosterior, GaussianPosterior, GgnKind, GgnMatrix};
use crate::linalg::{pairwise_sum, DenseMatrix};
use crate::net::MlpArchitecture;
use crate::predict::{predict, Posterior};
use crate::select::{
    dead_weight_filter, score_weights, select_final_layer, select_random, select_top_s_excluding, size_from_fraction, SelectionStrategy,
    SubnetworkMask,
};
use crate::train::{train_map, MapEstimate, TrainConfig};

/// Posterior families compared by the experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MethodSpec {
    Map,
    Full,
    Diag,
    FinalLayer,
    Subnetwork {
        strategy: SelectionStrategy,
        fraction: f64,
        /// Selection seeds for the random strategy.
        #[serde(default)]
        seeds: Vec<u64>,
    },
}

impl MethodSpec {
    pub fn label(&self) -> String {
        match self {
            MethodSpec::Map => "MAP".into(),
            MethodSpec::Full => "Full".into(),
            MethodSpec::Diag => "Diag".into(),
            MethodSpec::FinalLayer => "Final-layer".into(),
            MethodSpec::Subnetwork { strategy, fraction, .. } => {
                let name = match strategy {
                    SelectionStrategy::WassersteinExact | SelectionStrategy::WassersteinDiag => "Wass",
                    SelectionStrategy::Random => "Rand",
                    SelectionStrategy::Magnitude => "Mag",
                    SelectionStrategy::FinalLayer => "Final-layer",
                };
                format!("{name}-{}%", trim_pct(fraction * 100.0))
            }
        }
    }
}

fn trim_pct(p: f64) -> String {
    let r = (p * 1000.0).round() / 1000.0;
    if r.fract() == 0.0 {
        format!("{}", r as i64)
    } else {
        format!("{r}")
    }
}

/// Everything needed to build posteriors on one MAP estimate, with the
/// curvature computed once.
pub struct InferenceContext<'a> {
    pub map: &'a MapEstimate,
    train: &'a Dataset,
    /// Number of inference-eligible parameters `D`.
    pub total: usize,
    ggn_full: Option<GgnMatrix>,
    ggn_diag: GgnMatrix,
    /// Weights excluded from score-based selection.
    excluded: Vec<usize>,
    /// Whether subnetwork methods use `λ·S/D` instead of `λ`.
    rescale: bool,
}

impl<'a> InferenceContext<'a> {
    /// `dense` controls whether the full `D × D` data term is formed.
    pub fn new(map: &'a MapEstimate, train: &'a Dataset, include_biases: bool, dense: bool) -> Result<Self> {
        let total = map.arch.eligible_count(include_biases);
        let mask = SubnetworkMask::full(total);
        let ggn_full = if dense {
            Some(compute_ggn(map, train, &mask, GgnKind::Full, 0.0)?)
        } else {
            None
        };
        let ggn_diag = match &ggn_full {
            Some(g) => g.to_diagonal(),
            None => compute_ggn(map, train, &mask, GgnKind::Diagonal, 0.0)?,
        };
        Ok(Self {
            map,
            train,
            total,
            ggn_full,
            ggn_diag,
            excluded: Vec::new(),
            rescale: true,
        })
    }

    pub fn with_rescale(mut self, rescale: bool) -> Self {
        self.rescale = rescale;
        self
    }

    /// Excludes weights whose data-term curvature is at most `threshold`
    /// from score-based selection.
    pub fn with_dead_filter(mut self, threshold: Option<f64>) -> Self {
        self.excluded = match threshold {
            Some(t) => dead_weight_filter(&self.ggn_diag.data_term_diagonal(), t),
            None => Vec::new(),
        };
        self
    }

    pub fn excluded(&self) -> &[usize] {
        &self.excluded
    }

    fn full_ggn(&self) -> Result<&GgnMatrix> {
        self.ggn_full.as_ref().ok_or(Error::MissingCurvature("full GGN"))
    }

    /// Full-network posterior at prior precision `lambda`.
    pub fn full_posterior(&self, lambda: f64) -> Result<GaussianPosterior> {
        let g = self.full_ggn()?.with_prior(lambda)?;
        build_posterior(&g, self.map, &SubnetworkMask::full(self.total))
    }

    pub fn diag_posterior(&self, lambda: f64) -> Result<DiagonalPosterior> {
        DiagonalPosterior::from_ggn(&self.ggn_diag.with_prior(lambda)?, self.map)
    }

    /// Selection scores at prior precision `lambda`.
    pub fn scores(&self, strategy: SelectionStrategy, lambda: f64) -> Result<crate::select::SelectionScores> {
        let w = &self.map.weights.values()[..self.total];
        match strategy {
            SelectionStrategy::WassersteinExact => score_weights(strategy, w, Some(&self.full_ggn()?.with_prior(lambda)?)),
            SelectionStrategy::WassersteinDiag => score_weights(strategy, w, Some(&self.ggn_diag.with_prior(lambda)?)),
            _ => score_weights(strategy, w, None),
        }
    }

    /// Subnetwork posterior on `mask` with `λ_S = λ·S/D` (or `λ` when
    /// `rescale` is off). Uses the stored full data term when available.
    pub fn subnetwork_posterior(&self, mask: &SubnetworkMask, lambda: f64, rescale: bool) -> Result<GaussianPosterior> {
        let lambda_s = if rescale {
            rescale_prior(lambda, mask.len(), self.total)?
        } else {
            lambda
        };
        let ggn = match &self.ggn_full {
            Some(g) => g.restrict(mask, lambda_s)?,
            None => {
                let kind = if mask.is_full() { GgnKind::Full } else { GgnKind::Subnetwork };
                compute_ggn(self.map, self.train, mask, kind, lambda_s)?
            }
        };
        build_posterior(&ggn, self.map, mask)
    }
}

/// Builds the posterior of `method` at full-network prior precision
/// `lambda`. Random subnetworks use `selection_seed`.
pub fn method_posterior(
    ctx: &InferenceContext<'_>,
    method: &MethodSpec,
    lambda: f64,
    selection_seed: u64,
    include_biases: bool,
) -> Result<(Posterior, usize)> {
    match method {
        MethodSpec::Map => Ok((Posterior::Map, 0)),
        MethodSpec::Full => Ok((Posterior::Gaussian(ctx.full_posterior(lambda)?), ctx.total)),
        MethodSpec::Diag => Ok((Posterior::Diagonal(ctx.diag_posterior(lambda)?), ctx.total)),
        MethodSpec::FinalLayer => {
            let mask = select_final_layer(&ctx.map.arch, include_biases);
            let full = ctx.full_posterior(lambda)?;
            let post = GaussianPosterior::marginal(&full, &mask, ctx.map)?;
            Ok((Posterior::Gaussian(post), mask.len()))
        }
        MethodSpec::Subnetwork { strategy, fraction, .. } => {
            let s = size_from_fraction(ctx.total, *fraction)?;
            let mask = match strategy {
                SelectionStrategy::Random => select_random(ctx.total, s, selection_seed)?,
                SelectionStrategy::FinalLayer => select_final_layer(&ctx.map.arch, include_biases),
                _ => select_top_s_excluding(&ctx.scores(*strategy, lambda)?, s, ctx.excluded())?,
            };
            Ok((Posterior::Gaussian(ctx.subnetwork_posterior(&mask, lambda, ctx.rescale)?), mask.len()))
        }
    }
}

/// Settings of the two-cluster toy regression comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub n_per_cluster: usize,
    pub noise_std: f64,
    pub hidden_widths: Vec<usize>,
    pub lambda: f64,
    pub fractions: Vec<f64>,
    pub random_seeds: Vec<u64>,
    pub train: TrainConfig,
    /// Inputs at which predictions are reported.
    pub plot_range: (f64, f64),
    pub plot_points: usize,
    /// Evenly spaced probes strictly inside the gap between the clusters.
    pub gap_points: usize,
    /// Data-curvature threshold of the dead-weight filter (off when `None`).
    #[serde(default)]
    pub dead_filter: Option<f64>,
    /// Subnetwork prior `λ·S/D` when set, plain `λ` otherwise.
    #[serde(default = "default_true")]
    pub rescale_prior: bool,
    pub seed: u64,
}

fn default_true() -> bool {
    true
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            n_per_cluster: 100,
            noise_std: 0.1,
            hidden_widths: vec![50, 50],
            lambda: 3.0,
            fractions: vec![0.5, 0.03, 0.01],
            random_seeds: (0..5).collect(),
            train: TrainConfig {
                max_epochs: 20_000,
                patience: 20_000,
                ..TrainConfig::default()
            },
            plot_range: (-3.0, 3.0),
            plot_points: 121,
            gap_points: 31,
            dead_filter: None,
            rescale_prior: true,
            seed: 0,
        }
    }
}

/// One method (and, for random selection, one selection seed) on the toy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyMethodResult {
    pub label: String,
    pub subnet_size: usize,
    pub selection_seed: Option<u64>,
    /// Mean over the gap probes of the model (epistemic) std.
    pub in_between_std: f64,
    pub plot_mean: Vec<f64>,
    pub plot_std: Vec<f64>,
    pub gap_mean: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyReport {
    pub config: ToyConfig,
    pub total_weights: usize,
    pub noise_variance: f64,
    pub plot_x: Vec<f64>,
    pub gap_x: Vec<f64>,
    pub results: Vec<ToyMethodResult>,
}

impl ToyReport {
    /// In-between std of `label`, averaged over selection seeds.
    pub fn in_between_std(&self, label: &str) -> Option<f64> {
        let v: Vec<f64> = self
            .results
            .iter()
            .filter(|r| r.label == label)
            .map(|r| r.in_between_std)
            .collect();
        (!v.is_empty()).then(|| pairwise_sum(&v) / v.len() as f64)
    }

    pub fn get(&self, label: &str) -> Option<&ToyMethodResult> {
        self.results.iter().find(|r| r.label == label)
    }

    /// Long format: `method,selection_seed,subnet_size,x,mean,std`.
    pub fn write_predictions_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| Error::InvalidConfig(format!("writing toy predictions: {e}"));
        w.write_record(["method", "selection_seed", "subnet_size", "x", "mean", "std"]).map_err(err)?;
        for r in &self.results {
            let seed = r.selection_seed.map(|s| s.to_string()).unwrap_or_default();
            for ((x, m), s) in self.plot_x.iter().zip(&r.plot_mean).zip(&r.plot_std) {
                w.write_record([
                    r.label.clone(),
                    seed.clone(),
                    r.subnet_size.to_string(),
                    x.to_string(),
                    m.to_string(),
                    s.to_string(),
                ])
                .map_err(err)?;
            }
        }
        w.flush().map_err(|e| Error::io("toy predictions", e))
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.5 * (lo + hi)],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// Method list of the toy comparison.
pub fn toy_methods(cfg: &ToyConfig) -> Vec<MethodSpec> {
    let mut methods = vec![MethodSpec::Map, MethodSpec::Full, MethodSpec::Diag, MethodSpec::FinalLayer];
    for &fraction in &cfg.fractions {
        methods.push(MethodSpec::Subnetwork {
            strategy: SelectionStrategy::WassersteinExact,
            fraction,
            seeds: Vec::new(),
        });
    }
    for &fraction in &cfg.fractions {
        methods.push(MethodSpec::Subnetwork {
            strategy: SelectionStrategy::Random,
            fraction,
            seeds: cfg.random_seeds.clone(),
        });
    }
    methods
}

/// Trains the toy network once and compares every posterior family on it.
pub fn run_toy(cfg: &ToyConfig) -> Result<ToyReport> {
    let train = data::make_toy_1d(cfg.n_per_cluster, cfg.noise_std, cfg.seed)?;
    let arch = MlpArchitecture::new(1, cfg.hidden_widths.clone(), 1)?;
    let train_cfg = TrainConfig {
        seed: cfg.seed,
        task: Task::Regression,
        ..cfg.train.clone()
    };
    let map = train_map(&arch, &train, None, &train_cfg)?;
    let ctx = InferenceContext::new(&map, &train, false, true)?.with_dead_filter(cfg.dead_filter)
        .with_rescale(cfg.rescale_prior);

    let plot_x = linspace(cfg.plot_range.0, cfg.plot_range.1, cfg.plot_points);
    // Probes strictly inside the gap.
    let gap_x: Vec<f64> = {
        let all = linspace(TOY_GAP.0, TOY_GAP.1, cfg.gap_points + 2);
        all[1..all.len() - 1].to_vec()
    };
    let plot_inputs = DenseMatrix::column(&plot_x);
    let gap_inputs = DenseMatrix::column(&gap_x);

    let mut results = Vec::new();
    for method in toy_methods(cfg) {
        let seeds: Vec<Option<u64>> = match &method {
            MethodSpec::Subnetwork { seeds, strategy: SelectionStrategy::Random, .. } => seeds.iter().map(|s| Some(*s)).collect(),
            _ => vec![None],
        };
        for seed in seeds {
            let (post, size) = method_posterior(&ctx, &method, cfg.lambda, seed.unwrap_or(0), false)?;
            let plot = predict(&map, &post, &plot_inputs)?;
            let gap = predict(&map, &post, &gap_inputs)?;
            let gap_std: Vec<f64> = gap.model_variance.as_slice().iter().map(|v| v.sqrt()).collect();
            results.push(ToyMethodResult {
                label: method.label(),
                subnet_size: size,
                selection_seed: seed,
                in_between_std: pairwise_sum(&gap_std) / gap_std.len() as f64,
                plot_mean: plot.mean.as_slice().to_vec(),
                plot_std: plot.model_variance.as_slice().iter().map(|v| v.sqrt()).collect(),
                gap_mean: gap.mean.as_slice().to_vec(),
            });
        }
    }
    Ok(ToyReport {
        config: cfg.clone(),
        total_weights: ctx.total,
        noise_variance: map.noise_variance().unwrap_or(f64::NAN),
        plot_x,
        gap_x,
        results,
    })
}

/// Settings of the tabular comparison over standard and gap splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularConfig {
    pub dataset_name: String,
    pub hidden_widths: Vec<usize>,
    pub methods: Vec<MethodSpec>,
    pub grid: Vec<f64>,
    pub n_standard_splits: usize,
    /// Gap splits run along input dimensions `0..n_gap_splits`.
    pub n_gap_splits: usize,
    pub train: TrainConfig,
    pub seed: u64,
}

impl TabularConfig {
    pub fn wine_like() -> Self {
        Self {
            dataset_name: "wine".into(),
            hidden_widths: vec![50],
            methods: vec![
                MethodSpec::Map,
                MethodSpec::Subnetwork {
                    strategy: SelectionStrategy::WassersteinDiag,
                    fraction: 0.25,
                    seeds: Vec::new(),
                },
            ],
            grid: DEFAULT_LAMBDA_GRID.to_vec(),
            n_standard_splits: 20,
            n_gap_splits: 11,
            train: TrainConfig::default(),
            seed: 0,
        }
    }
}

/// Rows for one split: trains, tunes λ on validation per method, scores test.
pub fn run_split(
    data: &Dataset,
    spec: &SplitSpec,
    split_label: &str,
    cfg: &TabularConfig,
) -> Result<Vec<ResultRow>> {
    let split = data::split(data, spec)?;
    let norm = split.train.fit_normalization()?;
    let train = split.train.standardized(&norm)?;
    let val = split.val.standardized(&norm)?;
    let test = split.test.standardized(&norm)?;
    let arch = MlpArchitecture::new(data.input_dim(), cfg.hidden_widths.clone(), data.output_dim())?;
    let train_cfg = TrainConfig {
        seed: spec.seed,
        task: data.task(),
        ..cfg.train.clone()
    };
    let map = train_map(&arch, &train, Some(&val), &train_cfg)?;
    let needs_dense = cfg
        .methods
        .iter()
        .any(|m| !matches!(m, MethodSpec::Map | MethodSpec::Diag));
    let ctx = InferenceContext::new(&map, &train, false, needs_dense)?;

    let mut rows = Vec::new();
    for method in &cfg.methods {
        let seeds: Vec<u64> = match method {
            MethodSpec::Subnetwork { seeds, strategy: SelectionStrategy::Random, .. } if !seeds.is_empty() => seeds.clone(),
            _ => vec![spec.seed],
        };
        for sel_seed in seeds {
            let (post, size, lambda) = match method {
                MethodSpec::Map => (Posterior::Map, 0, f64::NAN),
                _ => {
                    let search = grid_search_lambda(&map, &val, &cfg.grid, |l| {
                        method_posterior(&ctx, method, l, sel_seed, false).map(|(p, _)| p)
                    })?;
                    let (p, s) = method_posterior(&ctx, method, search.best_lambda, sel_seed, false)?;
                    (p, s, search.best_lambda)
                }
            };
            let pred = predict(&map, &post, &test.inputs)?;
            let metrics: Metrics = eval::evaluate(&pred, &test)?;
            rows.extend(ResultRow::from_metrics(
                &cfg.dataset_name,
                split_label,
                sel_seed,
                &method.label(),
                size,
                lambda,
                &metrics,
            ));
        }
    }
    Ok(rows)
}

/// Standard splits (seeds `seed..seed+n`) then gap splits (one per input
/// dimension), as long-format rows. Gap split labels start with `gap`.
pub fn run_tabular(data: &Dataset, cfg: &TabularConfig) -> Result<Vec<ResultRow>> {
    if cfg.methods.is_empty() {
        return Err(Error::InvalidConfig("no methods to compare".into()));
    }
    let mut rows = Vec::new();
    for k in 0..cfg.n_standard_splits {
        let spec = SplitSpec::standard(cfg.seed + k as u64);
        rows.extend(run_split(data, &spec, &format!("std{k}"), cfg)?);
    }
    for dim in 0..cfg.n_gap_splits.min(data.input_dim()) {
        let spec = SplitSpec::gap(dim, cfg.seed);
        rows.extend(run_split(data, &spec, &format!("gap{dim}"), cfg)?);
    }
    Ok(rows)
}

/// Mean of `metric` for `method` over rows whose split label passes
/// `split_filter`.
pub fn mean_metric(rows: &[ResultRow], method: &str, metric: &str, split_filter: impl Fn(&str) -> bool) -> Option<f64> {
    let v: Vec<f64> = rows
        .iter()
        .filter(|r| r.method == method && r.metric == metric && split_filter(&r.split))
        .map(|r| r.value)
        .collect();
    eval::aggregate(&v).map(|a| a.mean)
}
