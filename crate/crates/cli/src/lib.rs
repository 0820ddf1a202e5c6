//! File-based pipeline behind the `sublap` binary.
//!
//! Stages hand artifacts to each other through files: checkpoint → mask →
//! posterior → predictions. Every run also writes `manifest.json` with the
//! fully resolved configuration.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use subnet_laplace::data::{self, CsvSchema, Dataset, Normalization, SplitSpec, Task};
use subnet_laplace::eval::{self, ResultRow, DEFAULT_LAMBDA_GRID};
use subnet_laplace::experiment::{self, MethodSpec, TabularConfig, ToyConfig};
use subnet_laplace::laplace::{build_posterior, compute_ggn, rescale_prior, GaussianPosterior, GgnKind, PosteriorDocument};
use subnet_laplace::net::{Checkpoint, MlpArchitecture};
use subnet_laplace::predict::{predict, Posterior};
use subnet_laplace::select::{
    dead_weight_filter, score_weights, select_final_layer, select_random, select_top_s_excluding, size_from_fraction,
    SelectionStrategy, SubnetworkMask,
};
use subnet_laplace::train::{train_map, MapEstimate, TrainConfig};

/// Environment variable holding the number of worker threads `evaluate`
/// may use (default 1).
pub const WORKERS_ENV: &str = "SUBLAP_WORKERS";

#[derive(Debug, Parser)]
#[command(name = "sublap", version, about = "Subnetwork linearized-Laplace inference for small MLPs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a MAP network and write a checkpoint.
    Train(TrainArgs),
    /// Score weights and write a subnetwork mask.
    Select(SelectArgs),
    /// Build the Gaussian posterior over a mask.
    Infer(InferArgs),
    /// Write linearized predictions for a dataset.
    Predict(PredictArgs),
    /// Compare methods over standard and gap splits of a dataset.
    Evaluate(EvaluateArgs),
    /// Run a built-in experiment end to end.
    Reproduce(ReproduceArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DataArgs {
    /// CSV file with a header row.
    #[arg(long)]
    pub data: PathBuf,
    /// Target column(s); defaults to the last column.
    #[arg(long, value_delimiter = ',')]
    pub target: Vec<String>,
    #[arg(long, value_enum, default_value_t = TaskArg::Regression)]
    pub task: TaskArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskArg {
    Regression,
    Classification,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Regression => Task::Regression,
            TaskArg::Classification => Task::Classification,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ArchArgs {
    /// Hidden widths, e.g. `50,50`. Overrides --hidden/--layers.
    #[arg(long, value_delimiter = ',')]
    pub arch: Option<Vec<usize>>,
    #[arg(long, default_value_t = 50)]
    pub hidden: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
}

impl ArchArgs {
    pub fn widths(&self) -> Vec<usize> {
        self.arch.clone().unwrap_or_else(|| vec![self.hidden; self.layers])
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct OptimArgs {
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 512)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 2000)]
    pub epochs: usize,
    #[arg(long, default_value_t = 500)]
    pub patience: usize,
}

impl OptimArgs {
    fn config(&self, task: Task, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            max_epochs: self.epochs,
            patience: self.patience.min(self.epochs),
            seed,
            task,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub arch: ArchArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    /// Fraction of the data held out for early stopping (0 disables it).
    #[arg(long, default_value_t = data::DEFAULT_VAL_FRACTION)]
    pub val_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum StrategyArg {
    WassExact,
    WassDiag,
    Random,
    FinalLayer,
    Magnitude,
}

impl From<StrategyArg> for SelectionStrategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::WassExact => SelectionStrategy::WassersteinExact,
            StrategyArg::WassDiag => SelectionStrategy::WassersteinDiag,
            StrategyArg::Random => SelectionStrategy::Random,
            StrategyArg::FinalLayer => SelectionStrategy::FinalLayer,
            StrategyArg::Magnitude => SelectionStrategy::Magnitude,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SelectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum)]
    pub strategy: StrategyArg,
    /// Subnetwork size as a fraction of the eligible parameters.
    #[arg(long, conflicts_with = "size")]
    pub fraction: Option<f64>,
    /// Absolute subnetwork size.
    #[arg(long)]
    pub size: Option<usize>,
    /// Prior precision used for the variance scores.
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    #[arg(long)]
    pub include_biases: bool,
    /// Exclude weights whose data curvature is at most this value.
    #[arg(long)]
    pub dead_filter: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Full-network prior precision λ.
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    /// Use λ for the subnetwork instead of λ·S/D.
    #[arg(long)]
    pub no_rescale: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Posterior file; predictions use the MAP alone when omitted.
    #[arg(long)]
    pub posterior: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub arch: ArchArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    /// Comma-separated methods: map, full, diag, final-layer, or
    /// `<strategy>:<fraction>` such as `wass-diag:0.25`.
    #[arg(long, value_delimiter = ',', default_value = "map,wass-diag:0.25")]
    pub methods: Vec<String>,
    /// `default` or comma-separated λ values.
    #[arg(long, default_value = "default")]
    pub grid: String,
    #[arg(long, default_value_t = 20)]
    pub splits: usize,
    /// Gap splits along the first N input dimensions (default: all).
    #[arg(long)]
    pub gap_splits: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum Experiment {
    Toy1d,
    TwoMoons,
    Tabular,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ReproduceArgs {
    #[arg(value_enum)]
    pub experiment: Experiment,
    /// Tabular CSV (last column is the target). A synthetic dataset of the
    /// wine shape is used when omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Writes `bytes` to a sibling temp file, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let name = path.file_name().context("output path has no file name")?.to_string_lossy();
    let tmp = path.with_file_name(format!(".{name}.tmp-{}", std::process::id()));
    let result = (|| -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn write_with<F>(path: &Path, f: F) -> anyhow::Result<()>
where
    F: FnOnce(&mut Vec<u8>) -> subnet_laplace::Result<()>,
{
    let mut buf = Vec::new();
    f(&mut buf)?;
    write_atomic(path, &buf)
}

fn read_text(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path)
        .map_err(|e| subnet_laplace::Error::io(path, e))
        .map_err(anyhow::Error::from)
}

fn write_manifest<A: Serialize>(out: &Path, command: &str, args: &A, extra: serde_json::Value) -> anyhow::Result<()> {
    let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    write_json(
        &out.join("manifest.json"),
        &json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "created_unix": stamp,
            "args": args,
            "resolved": extra,
        }),
    )
}

fn load_dataset(args: &DataArgs) -> anyhow::Result<Dataset> {
    let targets = if args.target.is_empty() {
        let text = read_text(&args.data)?;
        let header = text.lines().next().context("empty CSV file")?;
        let last = header.split(',').next_back().context("CSV header has no columns")?.trim().to_string();
        vec![last]
    } else {
        args.target.clone()
    };
    let schema = CsvSchema {
        target_columns: targets,
        task: args.task.into(),
    };
    Ok(data::load_csv(&args.data, &schema)?)
}

/// Checkpoint plus the standardization it was trained with.
struct LoadedModel {
    map: MapEstimate,
    normalization: Normalization,
}

fn load_model(path: &Path) -> anyhow::Result<LoadedModel> {
    let ck = Checkpoint::from_json(&read_text(path)?).with_context(|| format!("reading checkpoint {}", path.display()))?;
    let map = MapEstimate::from_checkpoint(&ck)?;
    let normalization = serde_json::from_value(
        ck.training_meta
            .get("normalization")
            .cloned()
            .context("checkpoint lacks its normalization")?,
    )?;
    Ok(LoadedModel { map, normalization })
}

fn load_standardized(args: &DataArgs, model: &LoadedModel) -> anyhow::Result<Dataset> {
    let raw = load_dataset(args)?;
    if raw.input_dim() != model.map.arch.input_dim {
        bail!(
            "{} has {} inputs but the checkpoint expects {}",
            args.data.display(),
            raw.input_dim(),
            model.map.arch.input_dim
        );
    }
    Ok(raw.standardized(&model.normalization)?)
}

pub fn cmd_train(args: &TrainArgs) -> anyhow::Result<()> {
    let raw = load_dataset(&args.data)?;
    let task: Task = args.data.task.into();
    let cfg = args.optim.config(task, args.seed);
    let (train_raw, val_raw) = if args.val_fraction > 0.0 {
        let mut idx: Vec<usize> = (0..raw.len()).collect();
        let mut rng = subnet_laplace::rng::stream(args.seed, "cli/train/val");
        rand_shuffle(&mut idx, &mut rng);
        let n_val = data::validation_count(raw.len(), args.val_fraction);
        if n_val == 0 || n_val >= raw.len() {
            bail!("validation fraction {} leaves no training or validation data", args.val_fraction);
        }
        let (v, t) = idx.split_at(n_val);
        let (mut t, mut v) = (t.to_vec(), v.to_vec());
        t.sort_unstable();
        v.sort_unstable();
        (raw.subset(&t), Some(raw.subset(&v)))
    } else {
        (raw.clone(), None)
    };
    let norm = train_raw.fit_normalization()?;
    let train = train_raw.standardized(&norm)?;
    let val = val_raw.map(|v| v.standardized(&norm)).transpose()?;
    let cfg = if val.is_none() {
        TrainConfig {
            patience: cfg.max_epochs,
            ..cfg
        }
    } else {
        cfg
    };
    let arch = MlpArchitecture::new(raw.input_dim(), args.arch.widths(), raw.output_dim())?;
    let map = train_map(&arch, &train, val.as_ref(), &cfg)?;
    let mut ck = map.to_checkpoint();
    ck.training_meta["normalization"] = serde_json::to_value(&norm)?;
    ck.training_meta["train_config"] = serde_json::to_value(&cfg)?;

    let out = &args.out;
    write_atomic(&out.join("checkpoint.json"), ck.to_json()?.as_bytes())?;
    let mut curve = Vec::new();
    map.write_curve_csv(&mut curve)?;
    write_atomic(&out.join("training_curve.csv"), &curve)?;
    write_manifest(
        out,
        "train",
        args,
        json!({"train_config": cfg, "architecture": arch, "n_train": train.len(), "n_val": val.as_ref().map_or(0, Dataset::len)}),
    )?;
    eprintln!(
        "trained {} parameters for {} epochs (kept epoch {}), wrote {}",
        arch.n_params(),
        map.train_loss_history.len(),
        map.best_epoch,
        out.join("checkpoint.json").display()
    );
    Ok(())
}

fn rand_shuffle<R: rand::Rng>(idx: &mut [usize], rng: &mut R) {
    use rand::seq::SliceRandom;
    idx.shuffle(rng);
}

/// Histogram of scores over 20 equal-width bins between min and max.
fn score_histogram(scores: &[f64]) -> String {
    let mut out = String::from("bin_lower,bin_upper,count\n");
    if scores.is_empty() {
        return out;
    }
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let bins = 20;
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for s in scores {
        let b = (((s - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    for (b, c) in counts.iter().enumerate() {
        out.push_str(&format!("{},{},{}\n", lo + b as f64 * width, lo + (b + 1) as f64 * width, c));
    }
    out
}

pub fn cmd_select(args: &SelectArgs) -> anyhow::Result<()> {
    let model = load_model(&args.checkpoint)?;
    let map = &model.map;
    let strategy: SelectionStrategy = args.strategy.into();
    let total = map.arch.eligible_count(args.include_biases);

    if strategy == SelectionStrategy::FinalLayer && (args.fraction.is_some() || args.size.is_some()) {
        eprintln!("warning: final-layer selection ignores --fraction/--size");
    }
    let size = match (args.fraction, args.size) {
        (_, Some(s)) => s,
        (Some(f), None) => size_from_fraction(total, f)?,
        (None, None) if strategy == SelectionStrategy::FinalLayer => 0,
        (None, None) => bail!("--fraction or --size is required for strategy {strategy}"),
    };

    let needs_data = strategy.is_variance_based() || args.dead_filter.is_some();
    let ggn = if needs_data {
        let train = load_standardized(&args.data, &model)?;
        let full = SubnetworkMask::full(total);
        let kind = if strategy == SelectionStrategy::WassersteinExact {
            GgnKind::Full
        } else {
            GgnKind::Diagonal
        };
        Some(compute_ggn(map, &train, &full, kind, args.lambda)?)
    } else {
        None
    };
    let excluded = match (args.dead_filter, &ggn) {
        (Some(t), Some(g)) => dead_weight_filter(&g.data_term_diagonal(), t),
        _ => Vec::new(),
    };

    let w = &map.weights.values()[..total];
    let (mask, scores) = match strategy {
        SelectionStrategy::Random => (select_random(total, size, args.seed)?, Vec::new()),
        SelectionStrategy::FinalLayer => (select_final_layer(&map.arch, args.include_biases), Vec::new()),
        _ => {
            let scores = score_weights(strategy, w, ggn.as_ref())?;
            (select_top_s_excluding(&scores, size, &excluded)?, scores.score_per_weight)
        }
    };

    write_atomic(&args.out.join("mask.json"), mask.to_json()?.as_bytes())?;
    if !scores.is_empty() {
        write_atomic(&args.out.join("score_histogram.csv"), score_histogram(&scores).as_bytes())?;
    }
    write_manifest(
        &args.out,
        "select",
        args,
        json!({"strategy": strategy.name(), "total": total, "size": mask.len(), "excluded_dead": excluded.len()}),
    )?;
    eprintln!("selected {} of {} parameters ({})", mask.len(), total, strategy);
    Ok(())
}

pub fn cmd_infer(args: &InferArgs) -> anyhow::Result<()> {
    let model = load_model(&args.checkpoint)?;
    let map = &model.map;
    let mask = SubnetworkMask::from_json(&read_text(&args.mask)?)?;
    if mask.total() > map.arch.n_params() {
        bail!("mask covers {} parameters but the network has {}", mask.total(), map.arch.n_params());
    }
    let train = load_standardized(&args.data, &model)?;
    let lambda_s = if args.no_rescale {
        args.lambda
    } else {
        rescale_prior(args.lambda, mask.len(), mask.total())?
    };
    let kind = if mask.is_full() { GgnKind::Full } else { GgnKind::Subnetwork };
    let ggn = compute_ggn(map, &train, &mask, kind, lambda_s)?;
    let post = build_posterior(&ggn, map, &mask)?;
    write_json(&args.out.join("posterior.json"), &post.to_document())?;
    write_manifest(
        &args.out,
        "infer",
        args,
        json!({"lambda": args.lambda, "lambda_s": lambda_s, "rescaled": !args.no_rescale, "subnet_size": mask.len(), "total": mask.total()}),
    )?;
    eprintln!("posterior over {} parameters, λ_S = {lambda_s}", mask.len());
    Ok(())
}

pub fn cmd_predict(args: &PredictArgs) -> anyhow::Result<()> {
    let model = load_model(&args.checkpoint)?;
    let map = &model.map;
    let data = load_standardized(&args.data, &model)?;
    let posterior = match &args.posterior {
        Some(p) => {
            let doc: PosteriorDocument = serde_json::from_str(&read_text(p)?)?;
            Posterior::Gaussian(GaussianPosterior::from_document(&doc, map)?)
        }
        None => Posterior::Map,
    };
    let pred = predict(map, &posterior, &data.inputs)?;
    let pred = match &model.normalization.targets {
        Some(t) => pred.destandardize(t)?,
        None => pred,
    };
    write_with(&args.out.join("predictions.csv"), |buf| pred.write_csv(buf))?;
    let metrics = eval::evaluate(&predict(map, &posterior, &data.inputs)?, &data)?;
    write_json(&args.out.join("metrics.json"), &metrics)?;
    write_manifest(&args.out, "predict", args, json!({"n": data.len()}))?;
    eprintln!("wrote {} predictions (test LL {:.4})", pred.len(), metrics.log_likelihood);
    Ok(())
}

/// Parses `map`, `full`, `diag`, `final-layer` or `<strategy>:<fraction>`.
pub fn parse_method(text: &str) -> anyhow::Result<MethodSpec> {
    let text = text.trim();
    Ok(match text {
        "map" => MethodSpec::Map,
        "full" => MethodSpec::Full,
        "diag" => MethodSpec::Diag,
        "final-layer" => MethodSpec::FinalLayer,
        _ => {
            let (name, fraction) = text
                .split_once(':')
                .with_context(|| format!("unknown method {text:?}; expected e.g. wass-diag:0.25"))?;
            let strategy: SelectionStrategy = name.parse()?;
            let fraction: f64 = fraction.parse().with_context(|| format!("bad fraction in {text:?}"))?;
            MethodSpec::Subnetwork {
                strategy,
                fraction,
                seeds: Vec::new(),
            }
        }
    })
}

pub fn parse_grid(text: &str) -> anyhow::Result<Vec<f64>> {
    if text.trim() == "default" {
        return Ok(DEFAULT_LAMBDA_GRID.to_vec());
    }
    let grid = text
        .split(',')
        .map(|v| v.trim().parse::<f64>().with_context(|| format!("bad λ value {v:?}")))
        .collect::<anyhow::Result<Vec<_>>>()?;
    if grid.is_empty() || grid.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
        bail!("λ grid must hold positive finite values");
    }
    Ok(grid)
}

fn worker_count() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or(1)
}

/// Runs every split, using up to `workers` threads, and returns the rows in
/// split order.
fn run_splits(data: &Dataset, cfg: &TabularConfig, workers: usize) -> anyhow::Result<Vec<ResultRow>> {
    let mut cells: Vec<(SplitSpec, String)> = (0..cfg.n_standard_splits)
        .map(|k| (SplitSpec::standard(cfg.seed + k as u64), format!("std{k}")))
        .collect();
    for dim in 0..cfg.n_gap_splits.min(data.input_dim()) {
        cells.push((SplitSpec::gap(dim, cfg.seed), format!("gap{dim}")));
    }
    if cfg.methods.is_empty() {
        bail!("no methods given");
    }
    let workers = workers.clamp(1, cells.len().max(1));
    let mut results: Vec<Option<subnet_laplace::Result<Vec<ResultRow>>>> = (0..cells.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let chunks: Vec<Vec<usize>> = (0..workers).map(|w| (w..cells.len()).step_by(workers).collect()).collect();
        let handles: Vec<_> = chunks
            .into_iter()
            .map(|ids| {
                let cells = &cells;
                scope.spawn(move || {
                    ids.into_iter()
                        .map(|i| (i, experiment::run_split(data, &cells[i].0, &cells[i].1, cfg)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("worker panicked") {
                results[i] = Some(r);
            }
        }
    });
    let mut rows = Vec::new();
    for r in results {
        rows.extend(r.expect("every cell ran")?);
    }
    Ok(rows)
}

fn write_report(out: &Path, rows: &[ResultRow], extra: serde_json::Value) -> anyhow::Result<()> {
    write_with(&out.join("results.csv"), |buf| eval::write_rows_csv(rows, buf))?;
    let std_rows: Vec<ResultRow> = rows.iter().filter(|r| r.split.starts_with("std")).cloned().collect();
    let gap_rows: Vec<ResultRow> = rows.iter().filter(|r| r.split.starts_with("gap")).cloned().collect();
    let summary = json!({
        "standard": eval::summarize(&std_rows),
        "gap": eval::summarize(&gap_rows),
        "all": eval::summarize(rows),
        "details": extra,
    });
    write_json(&out.join("summary.json"), &summary)?;
    let all = eval::summarize(rows);
    write_with(&out.join("series_ll.csv"), |buf| eval::write_series_csv(&all, "", "ll", buf))?;
    Ok(())
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> anyhow::Result<()> {
    if args.methods.is_empty() {
        bail!("empty method list");
    }
    let methods = args.methods.iter().map(|m| parse_method(m)).collect::<anyhow::Result<Vec<_>>>()?;
    let data = load_dataset(&args.data)?;
    let cfg = TabularConfig {
        dataset_name: args.data.data.file_stem().map_or("data".into(), |s| s.to_string_lossy().into_owned()),
        hidden_widths: args.arch.widths(),
        methods,
        grid: parse_grid(&args.grid)?,
        n_standard_splits: args.splits,
        n_gap_splits: args.gap_splits.unwrap_or(data.input_dim()),
        train: args.optim.config(args.data.task.into(), args.seed),
        seed: args.seed,
    };
    let rows = run_splits(&data, &cfg, worker_count())?;
    write_report(&args.out, &rows, json!({}))?;
    write_manifest(&args.out, "evaluate", args, serde_json::to_value(&cfg)?)?;
    eprintln!("wrote {} result rows to {}", rows.len(), args.out.display());
    Ok(())
}

pub fn cmd_reproduce(args: &ReproduceArgs) -> anyhow::Result<()> {
    match args.experiment {
        Experiment::Toy1d => {
            let cfg = ToyConfig {
                seed: args.seed,
                ..ToyConfig::default()
            };
            let report = experiment::run_toy(&cfg)?;
            write_with(&args.out.join("toy_predictions.csv"), |buf| report.write_predictions_csv(buf))?;
            let mut labels: Vec<String> = Vec::new();
            for r in &report.results {
                if !labels.contains(&r.label) {
                    labels.push(r.label.clone());
                }
            }
            let summary: Vec<serde_json::Value> = labels
                .iter()
                .map(|l| {
                    let size = report.get(l).map_or(0, |r| r.subnet_size);
                    json!({"method": l, "subnet_size": size, "in_between_std": report.in_between_std(l)})
                })
                .collect();
            write_json(
                &args.out.join("summary.json"),
                &json!({"total_weights": report.total_weights, "noise_variance": report.noise_variance, "methods": summary}),
            )?;
            write_manifest(&args.out, "reproduce", args, serde_json::to_value(&cfg)?)?;
            for s in &summary {
                eprintln!("{:<12} in-between std {:.4}", s["method"].as_str().unwrap_or(""), s["in_between_std"].as_f64().unwrap_or(f64::NAN));
            }
        }
        Experiment::TwoMoons => {
            let data = data::make_two_moons(500, 0.15, args.seed)?;
            let methods = ["map", "full", "diag", "final-layer", "wass-exact:0.5", "wass-exact:0.1", "wass-exact:0.03", "random:0.1"]
                .iter()
                .map(|m| parse_method(m))
                .collect::<anyhow::Result<Vec<_>>>()?;
            let cfg = TabularConfig {
                dataset_name: "two-moons".into(),
                hidden_widths: vec![50],
                methods,
                grid: DEFAULT_LAMBDA_GRID.to_vec(),
                n_standard_splits: 3,
                n_gap_splits: 0,
                train: TrainConfig {
                    task: Task::Classification,
                    learning_rate: 1e-2,
                    ..TrainConfig::default()
                },
                seed: args.seed,
            };
            let rows = run_splits(&data, &cfg, worker_count())?;
            write_report(&args.out, &rows, json!({}))?;
            write_manifest(&args.out, "reproduce", args, serde_json::to_value(&cfg)?)?;
        }
        Experiment::Tabular => {
            let (data, source) = match &args.data {
                Some(p) => {
                    let args = DataArgs {
                        data: p.clone(),
                        target: Vec::new(),
                        task: TaskArg::Regression,
                    };
                    (load_dataset(&args)?, p.display().to_string())
                }
                None => (wine_like_dataset(args.seed)?, "synthetic wine-shaped data".to_string()),
            };
            let cfg = TabularConfig {
                seed: args.seed,
                n_gap_splits: data.input_dim(),
                ..TabularConfig::wine_like()
            };
            let rows = run_splits(&data, &cfg, worker_count())?;
            write_report(&args.out, &rows, json!({"source": source}))?;
            write_manifest(&args.out, "reproduce", args, serde_json::to_value(&cfg)?)?;
        }
    }
    Ok(())
}

/// Synthetic regression data with the wine dataset's shape (1439 × 11).
pub fn wine_like_dataset(seed: u64) -> subnet_laplace::Result<Dataset> {
    let info = data::tabular_info("wine").expect("wine is a known dataset");
    data::make_synthetic_tabular(info.n_points, info.input_dim, WINE_LIKE_NOISE, seed)
}

/// Noise level of the synthetic wine substitute.
pub const WINE_LIKE_NOISE: f64 = 0.5;

pub fn run(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Select(a) => cmd_select(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Reproduce(a) => cmd_reproduce(a),
    }
}

/// Exit status for an error: 2 when an input file is missing, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(subnet_laplace::Error::Io { source, .. }) = cause.downcast_ref::<subnet_laplace::Error>() {
            if source.kind() == std::io::ErrorKind::NotFound {
                return 2;
            }
        }
        if let Some(io) = cause.downcast_ref::<std::io::Error>() {
            if io.kind() == std::io::ErrorKind::NotFound {
                return 2;
            }
        }
    }
    1
}
