//! Argument parsing and the command implementations behind `spectra`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::Value;
use spectra_core::data::{
    apply_mask, load_csv, read_mask_csv, write_csv, MaskSpec, MaskedBatch, MissingPattern,
    TimeSeriesBatch,
};
use spectra_core::evaluate::{reference_impute, MetricReport, ReferenceImputer};
use spectra_core::spectral::{gram_rows, transform, SpectralKind, WindowSpec};
use spectra_tensor::Tensor;

use crate::ablate::{mask_hash, parse_grid, run_ablation};
use crate::checkpoint;
use crate::config::{Overrides, RunConfig, SEED_ENV};
use crate::error::{CliError, Result};
use crate::experiment::{self, evaluate, mae_by_samples, prepare};
use crate::io::{long_csv, read_long_csv, write_atomic};
use crate::plot::{Chart, Series};

#[derive(Debug, Parser)]
#[command(name = "spectra", version, about = "Diffusion imputation for multivariate time series")]
pub struct Cli {
    /// Seed for every random draw. Falls back to the config, then to
    /// SPECTRA_SEED, then to 0.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write its checkpoint and training log.
    Train(TrainArgs),
    /// Fill the empty cells of a CSV with a trained model.
    Impute(ImputeArgs),
    /// Score imputations, either from files or from a checkpoint's test split.
    Eval(EvalArgs),
    /// Train and score a grid of model variants on shared seeds and masks.
    Ablate(AblateArgs),
    /// Hide entries of a complete CSV and write the masked CSV and the mask.
    Mask(MaskArgs),
    /// Render SVG line charts.
    #[command(subcommand)]
    Plot(PlotCommand),
    /// Spectral debugging tools.
    #[command(subcommand)]
    Spectra(SpectraCommand),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run configuration (JSON); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for model.json, model.bin and train_log.json.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ImputeArgs {
    /// Checkpoint manifest written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// CSV whose empty cells are imputed.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of samples K.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Comma-separated quantile levels.
    #[arg(long, value_delimiter = ',')]
    pub quantiles: Option<Vec<f64>>,
    /// Also write every sample to samples.csv.
    #[arg(long)]
    pub save_samples: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Score a checkpoint on its configured test split and mask.
    #[arg(long, conflicts_with_all = ["pred", "truth", "mask", "sample_file"])]
    pub checkpoint: Option<PathBuf>,
    /// Imputed CSV.
    #[arg(long, requires_all = ["truth", "mask"])]
    pub pred: Option<PathBuf>,
    /// Complete CSV with the true values.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Mask CSV of (b, t, d) triples marking the scored entries.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Per-sample CSV written by `impute --save-samples`, for CRPS.
    #[arg(long, requires = "pred")]
    pub sample_file: Option<PathBuf>,
    /// Number of samples K in checkpoint mode.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Sample counts for the MAE-versus-K curve; powers of two up to K by
    /// default.
    #[arg(long, value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
    /// JSON report path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `all` or comma-separated variants such as `dft-attention,none-conv`.
    #[arg(long, default_value = "all")]
    pub grid: String,
    /// Comma-separated seeds; the global seed when omitted.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PatternArg {
    Pointwise,
    Timewise,
}

#[derive(Debug, Args)]
pub struct MaskArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "pointwise")]
    pub pattern: PatternArg,
    #[arg(long, default_value_t = 0.1)]
    pub rate: f64,
    #[arg(long)]
    pub block_min: Option<usize>,
    #[arg(long)]
    pub block_max: Option<usize>,
    /// Time-wise blocks shared by all features.
    #[arg(long)]
    pub aligned: bool,
    /// Masked CSV output.
    #[arg(long)]
    pub out_data: PathBuf,
    /// Mask CSV output.
    #[arg(long)]
    pub out_mask: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum PlotCommand {
    /// MAE against K from eval reports, or loss against epoch from
    /// training logs; one series per input.
    Curve(PlotArgs),
    /// Mean magnitude per bin from `spectra dump` files; one series per
    /// input.
    Spectra(PlotArgs),
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long = "input", required = true)]
    pub inputs: Vec<PathBuf>,
    /// Series labels in input order; file stems by default.
    #[arg(long = "label")]
    pub labels: Vec<String>,
    #[arg(long)]
    pub title: Option<String>,
    /// SVG output path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum SpectraCommand {
    /// Write the gram of one feature as (frame, bin, re, im) rows.
    Dump(DumpArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum KindArg {
    Dft,
    Stft,
    Frsst,
}

#[derive(Debug, Args)]
pub struct DumpArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Feature name or zero-based column index.
    #[arg(long, default_value = "0")]
    pub feature: String,
    #[arg(long, value_enum, default_value = "dft")]
    pub kind: KindArg,
    /// Analysis window length; about two thirds of the segment by default.
    #[arg(long)]
    pub window: Option<usize>,
    /// Hop; half the window by default.
    #[arg(long)]
    pub hop: Option<usize>,
    /// First row of the segment.
    #[arg(long, default_value_t = 0)]
    pub start: usize,
    /// Segment length; through the last row by default.
    #[arg(long)]
    pub length: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

fn env_seed() -> Option<String> {
    std::env::var(SEED_ENV).ok()
}

fn load_config(path: Option<&Path>, over: &Overrides) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.resolve(over, env_seed().as_deref())
}

/// Flag, then `SPECTRA_SEED`, then `fallback`.
fn seed_or(flag: Option<u64>, fallback: u64) -> Result<u64> {
    match (flag, env_seed()) {
        (Some(s), _) => Ok(s),
        (None, Some(text)) => text
            .trim()
            .parse()
            .map_err(|_| CliError::config(format!("{SEED_ENV}={text:?} is not an unsigned integer"))),
        (None, None) => Ok(fallback),
    }
}

fn json_bytes(value: &impl Serialize) -> Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s.into_bytes())
}

fn csv_bytes(batch: &TimeSeriesBatch) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    write_csv(batch, &mut bytes)?;
    Ok(bytes)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => train(a, cli.seed),
        Command::Impute(a) => impute(a, cli.seed),
        Command::Eval(a) => eval(a, cli.seed),
        Command::Ablate(a) => ablate(a, cli.seed),
        Command::Mask(a) => mask(a, cli.seed),
        Command::Plot(PlotCommand::Curve(a)) => plot_curve(a),
        Command::Plot(PlotCommand::Spectra(a)) => plot_spectra(a),
        Command::Spectra(SpectraCommand::Dump(a)) => dump(a),
    }
}

#[derive(Serialize)]
struct TrainLog<'a> {
    config: &'a RunConfig,
    train_windows: usize,
    val_windows: usize,
    best_epoch: usize,
    best_val_loss: Option<f64>,
    epochs: &'a [spectra_core::train::EpochLog],
}

fn train(a: TrainArgs, seed: Option<u64>) -> Result<()> {
    let over = Overrides {
        seed,
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.learning_rate,
        samples: None,
    };
    let cfg = load_config(a.config.as_deref(), &over)?;
    let splits = prepare(&cfg)?;
    let trained = experiment::train(&cfg, &splits, |e| match e.val_loss {
        Some(v) => eprintln!("epoch {:>4}  lr {:.2e}  train {:.6}  val {:.6}", e.epoch, e.lr, e.train_loss, v),
        None => eprintln!("epoch {:>4}  lr {:.2e}  train {:.6}", e.epoch, e.lr, e.train_loss),
    })?;
    let out = &trained.outcome;
    checkpoint::save(&a.out.join("model.json"), &cfg, &splits.normalizer, out.best_epoch, &out.params)?;
    let log = TrainLog {
        config: &cfg,
        train_windows: splits.train.batch(),
        val_windows: splits.val.as_ref().map_or(0, |v| v.batch()),
        best_epoch: out.best_epoch,
        best_val_loss: out.best_val_loss,
        epochs: &out.log,
    };
    write_atomic(&a.out.join("train_log.json"), &json_bytes(&log)?)?;
    eprintln!("wrote {} (best epoch {})", a.out.join("model.json").display(), out.best_epoch);
    Ok(())
}

/// Window starts covering `n` rows: every `t` rows, plus one window ending
/// at the last row when `t` does not divide `n`.
pub fn cover_starts(n: usize, t: usize) -> Vec<usize> {
    let mut starts: Vec<usize> = (0..n / t).map(|w| w * t).collect();
    if n % t != 0 {
        starts.push(n - t);
    }
    starts
}

/// Rows `[N, D]` from per-window values `[W, T, D]`; a row covered twice is
/// taken from the earlier window.
pub fn stitch(windows: &[f64], n: usize, t: usize, d: usize) -> Vec<f64> {
    let full = n / t;
    let mut out = Vec::with_capacity(n * d);
    for r in 0..n {
        let (w, off) = if r < full * t { (r / t, r % t) } else { (full, r - (n - t)) };
        let at = (w * t + off) * d;
        out.extend_from_slice(&windows[at..at + d]);
    }
    out
}

fn windows_of(series: &TimeSeriesBatch, t: usize) -> Result<TimeSeriesBatch> {
    let (n, d) = (series.len(), series.features());
    let starts = cover_starts(n, t);
    let mut values = Vec::with_capacity(starts.len() * t * d);
    let mut mask = Vec::with_capacity(values.capacity());
    for &s in &starts {
        values.extend_from_slice(&series.values.data()[s * d..(s + t) * d]);
        mask.extend_from_slice(&series.mask.data()[s * d..(s + t) * d]);
    }
    let shape = [starts.len(), t, d];
    let tensor = |v| Tensor::from_vec(v, &shape).map_err(spectra_core::Error::from);
    Ok(TimeSeriesBatch::new(
        tensor(values)?,
        tensor(mask)?,
        series.timestamps.clone(),
        starts,
        series.feature_names.clone(),
    )?)
}

#[derive(Serialize)]
struct ImputeReport<'a> {
    checkpoint: String,
    data: String,
    seed: u64,
    samples: usize,
    quantiles: &'a [f64],
    rows: usize,
    features: usize,
    windows: usize,
    imputed_entries: usize,
    config: &'a RunConfig,
}

fn impute(a: ImputeArgs, seed: Option<u64>) -> Result<()> {
    let ck = checkpoint::load(&a.checkpoint)?;
    let cfg = &ck.manifest.config;
    let mut sampling = cfg.sampling.clone();
    if let Some(k) = a.samples {
        sampling.samples = k;
    }
    if let Some(q) = a.quantiles {
        sampling.quantiles = q;
    }
    if sampling.samples == 0 {
        return Err(CliError::config("at least one sample is needed"));
    }
    if let Some(q) = sampling.quantiles.iter().find(|q| !(0.0..=1.0).contains(*q)) {
        return Err(CliError::config(format!("quantile level {q} outside [0, 1]")));
    }
    let seed = seed.unwrap_or(cfg.seed());
    let series = load_csv(&a.data)?;
    let (n, d, t) = (series.len(), series.features(), cfg.model.seq_len);
    if d != cfg.model.features {
        return Err(CliError::data(format!("data has {d} features but the checkpoint expects {}", cfg.model.features)));
    }
    if n < t {
        return Err(CliError::data(format!("data has {n} rows, fewer than the window length {t}")));
    }
    let windows = windows_of(&series, t)?;
    let res = experiment::impute_batch(cfg, &ck.model, &ck.params, &ck.manifest.normalizer, &windows, &sampling, seed)?;
    let per = windows.values.numel();
    let mean = stitch(res.mean.data(), n, t, d);
    let filled = TimeSeriesBatch::new(
        Tensor::from_vec(mean, &[1, n, d]).map_err(spectra_core::Error::from)?,
        Tensor::ones(&[1, n, d]),
        series.timestamps.clone(),
        vec![0],
        series.feature_names.clone(),
    )?;
    write_atomic(&a.out.join("imputed.csv"), &csv_bytes(&filled)?)?;
    let quantiles: Vec<(String, Vec<f64>)> = res
        .quantiles
        .iter()
        .map(|(q, v)| (format!("{q}"), stitch(v.data(), n, t, d)))
        .collect();
    let slabs: Vec<(String, &[f64])> = quantiles.iter().map(|(l, v)| (l.clone(), v.as_slice())).collect();
    write_atomic(
        &a.out.join("quantiles.csv"),
        &long_csv(&series.timestamps, &series.feature_names, "level", &slabs)?,
    )?;
    if a.save_samples {
        let samples: Vec<(String, Vec<f64>)> = res
            .samples
            .data()
            .chunks(per)
            .enumerate()
            .map(|(k, c)| (k.to_string(), stitch(c, n, t, d)))
            .collect();
        let slabs: Vec<(String, &[f64])> = samples.iter().map(|(l, v)| (l.clone(), v.as_slice())).collect();
        write_atomic(
            &a.out.join("samples.csv"),
            &long_csv(&series.timestamps, &series.feature_names, "sample", &slabs)?,
        )?;
    }
    let report = ImputeReport {
        checkpoint: a.checkpoint.display().to_string(),
        data: a.data.display().to_string(),
        seed,
        samples: sampling.samples,
        quantiles: &sampling.quantiles,
        rows: n,
        features: d,
        windows: windows.batch(),
        imputed_entries: series.mask.data().iter().filter(|&&m| m == 0.0).count(),
        config: cfg,
    };
    write_atomic(&a.out.join("impute.json"), &json_bytes(&report)?)?;
    eprintln!("imputed {} entries into {}", report.imputed_entries, a.out.display());
    Ok(())
}

#[derive(Serialize)]
#[serde(rename_all = "snake_case")]
enum EvalSource {
    Files {
        pred: String,
        truth: String,
        mask: String,
        samples: Option<String>,
    },
    Checkpoint {
        path: String,
        samples: usize,
        seed: u64,
        config: RunConfig,
    },
}

#[derive(Serialize)]
struct NamedReport {
    name: String,
    report: MetricReport,
}

#[derive(Serialize)]
struct Ranked {
    name: String,
    mae: f64,
}

#[derive(Serialize)]
struct KPoint {
    k: usize,
    mae: f64,
}

#[derive(Serialize)]
struct EvalReport {
    source: EvalSource,
    mask_hash: String,
    model: MetricReport,
    baselines: Vec<NamedReport>,
    /// Model and baselines ordered by MAE.
    ranking: Vec<Ranked>,
    model_beats_baseline: BTreeMap<String, bool>,
    mae_by_samples: Vec<KPoint>,
}

impl EvalReport {
    fn new(
        source: EvalSource,
        mask_hash: String,
        model: MetricReport,
        baselines: Vec<(ReferenceImputer, MetricReport)>,
        curve: Vec<KPoint>,
    ) -> Self {
        let mut ranking: Vec<Ranked> = std::iter::once(("model".to_string(), model.mae))
            .chain(baselines.iter().map(|(k, r)| (k.name().to_string(), r.mae)))
            .map(|(name, mae)| Ranked { name, mae })
            .collect();
        ranking.sort_by(|a, b| a.mae.total_cmp(&b.mae));
        let model_beats_baseline = baselines
            .iter()
            .map(|(k, r)| (k.name().to_string(), model.mae < r.mae))
            .collect();
        Self {
            source,
            mask_hash,
            model,
            baselines: baselines
                .into_iter()
                .map(|(k, report)| NamedReport {
                    name: k.name().into(),
                    report,
                })
                .collect(),
            ranking,
            model_beats_baseline,
            mae_by_samples: curve,
        }
    }

    fn print(&self) {
        print!("{}", self.model);
        for r in &self.ranking {
            println!("{:<14} mae {:.6}", r.name, r.mae);
        }
        for p in &self.mae_by_samples {
            println!("K={:<4} mae {:.6}", p.k, p.mae);
        }
    }
}

fn default_ks(k: usize) -> Vec<usize> {
    let mut ks: Vec<usize> = std::iter::successors(Some(1usize), |x| Some(x * 2)).take_while(|&x| x < k).collect();
    ks.push(k);
    ks
}

fn curve(samples: &Tensor<f64>, truth: &Tensor<f64>, mask: &Tensor<f64>, ks: Option<Vec<usize>>) -> Result<Vec<KPoint>> {
    let ks = ks.unwrap_or_else(|| default_ks(samples.dim(0)));
    Ok(ks
        .iter()
        .zip(mae_by_samples(samples, truth, mask, &ks)?)
        .map(|(&k, mae)| KPoint { k, mae })
        .collect())
}

fn baselines_for(masked: &TimeSeriesBatch, truth: &Tensor<f64>, eval_mask: &Tensor<f64>) -> Result<Vec<(ReferenceImputer, MetricReport)>> {
    ReferenceImputer::ALL
        .iter()
        .map(|&kind| {
            let pred = reference_impute(masked, kind)?;
            Ok((kind, MetricReport::compute(&pred, truth, eval_mask, None, &masked.feature_names)?))
        })
        .collect()
}

fn eval(a: EvalArgs, seed: Option<u64>) -> Result<()> {
    let report = match (&a.checkpoint, &a.pred) {
        (Some(path), _) => eval_checkpoint(path, &a, seed)?,
        (None, Some(pred)) => eval_files(pred, &a)?,
        (None, None) => return Err(CliError::config("eval needs --checkpoint or --pred/--truth/--mask")),
    };
    write_atomic(&a.out, &json_bytes(&report)?)?;
    report.print();
    Ok(())
}

fn eval_checkpoint(path: &Path, a: &EvalArgs, seed: Option<u64>) -> Result<EvalReport> {
    let ck = checkpoint::load(path)?;
    let mut cfg = ck.manifest.config.clone();
    if let Some(k) = a.samples {
        cfg.sampling.samples = k;
    }
    let seed = seed.unwrap_or(cfg.seed());
    cfg.mask.seed = seed;
    cfg.validate()?;
    let splits = prepare(&cfg)?;
    let ev = evaluate(
        &cfg,
        &ck.model,
        &ck.params,
        &ck.manifest.normalizer,
        &splits.test,
        &cfg.mask,
        &cfg.sampling,
        seed,
    )?;
    let points = curve(&ev.imputation.samples, &ev.masked.truth, &ev.masked.eval_mask, a.ks.clone())?;
    let source = EvalSource::Checkpoint {
        path: path.display().to_string(),
        samples: cfg.sampling.samples,
        seed,
        config: cfg,
    };
    Ok(EvalReport::new(source, mask_hash(&ev.masked)?.0, ev.report, ev.baselines, points))
}

fn eval_files(pred_path: &Path, a: &EvalArgs) -> Result<EvalReport> {
    let (truth_path, mask_path) = match (&a.truth, &a.mask) {
        (Some(t), Some(m)) => (t, m),
        _ => return Err(CliError::config("--pred needs --truth and --mask")),
    };
    let pred = load_csv(pred_path)?;
    let truth = load_csv(truth_path)?;
    if pred.values.shape() != truth.values.shape() {
        return Err(CliError::data(format!(
            "prediction {:?} and truth {:?} are misaligned",
            pred.values.shape(),
            truth.values.shape()
        )));
    }
    let shape = truth.values.shape().to_vec();
    let file = std::fs::File::open(mask_path).map_err(|e| CliError::data(format!("{}: {e}", mask_path.display())))?;
    let eval_mask = read_mask_csv(file, &shape)?;
    let m = eval_mask.data();
    if m.iter().zip(truth.mask.data()).any(|(&e, &o)| e > 0.0 && o == 0.0) {
        return Err(CliError::data("the mask scores entries that are missing from the truth file"));
    }
    if m.iter().zip(pred.mask.data()).any(|(&e, &o)| e > 0.0 && o == 0.0) {
        return Err(CliError::data("the prediction leaves scored entries empty"));
    }
    let samples = match &a.sample_file {
        Some(p) => {
            let table = read_long_csv(p)?;
            if table.timestamps.len() * table.names.len() != truth.values.numel() {
                return Err(CliError::data(format!("{} is misaligned with the truth", p.display())));
            }
            let k = table.slabs.len();
            let mut all = Vec::with_capacity(k * truth.values.numel());
            table.slabs.iter().for_each(|s| all.extend_from_slice(s));
            let mut sshape = vec![k];
            sshape.extend_from_slice(&shape);
            Some(Tensor::from_vec(all, &sshape).map_err(spectra_core::Error::from)?)
        }
        None => None,
    };
    let report = MetricReport::compute(&pred.values, &truth.values, &eval_mask, samples.as_ref(), &truth.feature_names)?;
    let hidden: Vec<f64> = truth.mask.data().iter().zip(m).map(|(&o, &e)| if e > 0.0 { 0.0 } else { o }).collect();
    let masked = TimeSeriesBatch {
        mask: Tensor::from_vec(hidden, &shape).map_err(spectra_core::Error::from)?,
        ..truth.clone()
    };
    let baselines = baselines_for(&masked, &truth.values, &eval_mask)?;
    let points = match &samples {
        Some(s) => curve(s, &truth.values, &eval_mask, a.ks.clone())?,
        None => Vec::new(),
    };
    let mb = MaskedBatch {
        batch: masked,
        eval_mask,
        truth: truth.values.clone(),
    };
    let source = EvalSource::Files {
        pred: pred_path.display().to_string(),
        truth: truth_path.display().to_string(),
        mask: mask_path.display().to_string(),
        samples: a.sample_file.as_ref().map(|p| p.display().to_string()),
    };
    Ok(EvalReport::new(source, mask_hash(&mb)?.0, report, baselines, points))
}

fn ablate(a: AblateArgs, seed: Option<u64>) -> Result<()> {
    let over = Overrides {
        seed,
        epochs: a.epochs,
        samples: a.samples,
        ..Overrides::default()
    };
    let cfg = load_config(a.config.as_deref(), &over)?;
    let grid = parse_grid(&a.grid)?;
    let seeds = a.seeds.clone().unwrap_or_else(|| vec![cfg.seed()]);
    let result = run_ablation(&cfg, &grid, &seeds, Some(&a.out.join("masks")), |c| match &c.outcome {
        crate::ablate::CellOutcome::Ok(m) => eprintln!("{} seed {}: mae {:.6}", c.variant, c.seed, m.mae),
        crate::ablate::CellOutcome::Failed { error } => eprintln!("{} seed {} failed: {error}", c.variant, c.seed),
    })?;
    write_atomic(&a.out.join("ablation.csv"), &result.table_csv()?)?;
    write_atomic(&a.out.join("ablation_runs.csv"), &result.runs_csv()?)?;
    write_atomic(&a.out.join("ablation.json"), &json_bytes(&result)?)?;
    let text = result.ranked_text();
    write_atomic(&a.out.join("summary.txt"), text.as_bytes())?;
    print!("{text}");
    if result.summary.iter().all(|s| s.runs == 0) {
        return Err(CliError::data("every variant failed"));
    }
    Ok(())
}

#[derive(Serialize)]
struct MaskReport {
    data: String,
    spec: MaskSpec,
    hidden: usize,
    mask_hash: String,
}

fn mask(a: MaskArgs, seed: Option<u64>) -> Result<()> {
    let spec = MaskSpec {
        pattern: match a.pattern {
            PatternArg::Pointwise => MissingPattern::Pointwise,
            PatternArg::Timewise => MissingPattern::Timewise,
        },
        rate: a.rate,
        block_min: a.block_min,
        block_max: a.block_max,
        aligned: a.aligned,
        seed: seed_or(seed, 0)?,
    };
    let series = load_csv(&a.data)?;
    let masked = apply_mask(&series, &spec)?;
    let (hash, bytes) = mask_hash(&masked)?;
    write_atomic(&a.out_data, &csv_bytes(&masked.batch)?)?;
    write_atomic(&a.out_mask, &bytes)?;
    let report = MaskReport {
        data: a.data.display().to_string(),
        spec,
        hidden: masked.eval_mask.data().iter().filter(|&&m| m > 0.0).count(),
        mask_hash: hash,
    };
    print!("{}", String::from_utf8(json_bytes(&report)?).expect("json is utf-8"));
    Ok(())
}

fn labels(a: &PlotArgs) -> Result<Vec<String>> {
    if !a.labels.is_empty() && a.labels.len() != a.inputs.len() {
        return Err(CliError::config(format!("{} labels for {} inputs", a.labels.len(), a.inputs.len())));
    }
    Ok(a.inputs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            a.labels.get(i).cloned().unwrap_or_else(|| {
                p.file_stem().map_or_else(|| format!("input{i}"), |s| s.to_string_lossy().into_owned())
            })
        })
        .collect())
}

fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn points(path: &Path, v: &Value, key: &str, x: &str, y: &str) -> Result<Vec<(f64, f64)>> {
    let arr = v[key]
        .as_array()
        .ok_or_else(|| CliError::data(format!("{}: no {key:?} array", path.display())))?;
    arr.iter()
        .map(|p| match (p[x].as_f64(), p[y].as_f64()) {
            (Some(a), Some(b)) => Ok((a, b)),
            _ => Err(CliError::data(format!("{}: {key:?} entry without numeric {x} and {y}", path.display()))),
        })
        .collect()
}

fn plot_curve(a: PlotArgs) -> Result<()> {
    let names = labels(&a)?;
    let docs: Vec<Value> = a.inputs.iter().map(|p| read_json(p)).collect::<Result<_>>()?;
    let is_eval = |v: &Value| v.get("mae_by_samples").is_some();
    let evals = docs.iter().filter(|v| is_eval(v)).count();
    if evals != 0 && evals != docs.len() {
        return Err(CliError::data("cannot mix eval reports and training logs in one plot"));
    }
    let (key, x, y, x_label, y_label, title) = if evals > 0 {
        ("mae_by_samples", "k", "mae", "samples K", "MAE", "MAE versus number of samples")
    } else {
        ("epochs", "epoch", "train_loss", "epoch", "training loss", "Training loss")
    };
    let series = docs
        .iter()
        .zip(&a.inputs)
        .zip(names)
        .map(|((v, p), label)| {
            let pts = points(p, v, key, x, y)?;
            if pts.is_empty() {
                return Err(CliError::data(format!("{} has no points to plot", p.display())));
            }
            Ok(Series { label, points: pts })
        })
        .collect::<Result<_>>()?;
    let chart = Chart {
        title: a.title.clone().unwrap_or_else(|| title.into()),
        x_label: x_label.into(),
        y_label: y_label.into(),
        series,
    };
    write_atomic(&a.out, chart.to_svg()?.as_bytes())
}

/// Mean magnitude per bin over the frames of a dumped gram.
fn mean_magnitudes(path: &Path) -> Result<Vec<(f64, f64)>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for (r, rec) in rdr.deserialize::<(usize, usize, f64, f64)>().enumerate() {
        let (_, bin, re, im) = rec.map_err(|e| CliError::data(format!("{} row {}: {e}", path.display(), r + 2)))?;
        let e = sums.entry(bin).or_insert((0.0, 0));
        e.0 += re.hypot(im);
        e.1 += 1;
    }
    if sums.is_empty() {
        return Err(CliError::data(format!("{} has no gram rows", path.display())));
    }
    Ok(sums.into_iter().map(|(b, (s, c))| (b as f64, s / c as f64)).collect())
}

fn plot_spectra(a: PlotArgs) -> Result<()> {
    let names = labels(&a)?;
    let series = a
        .inputs
        .iter()
        .zip(names)
        .map(|(p, label)| Ok(Series { label, points: mean_magnitudes(p)? }))
        .collect::<Result<_>>()?;
    let chart = Chart {
        title: a.title.clone().unwrap_or_else(|| "Spectral magnitude".into()),
        x_label: "bin".into(),
        y_label: "mean |coefficient|".into(),
        series,
    };
    write_atomic(&a.out, chart.to_svg()?.as_bytes())
}

fn dump(a: DumpArgs) -> Result<()> {
    let series = load_csv(&a.data)?;
    let (n, d) = (series.len(), series.features());
    let f = match a.feature.parse::<usize>() {
        Ok(i) if i < d => i,
        Ok(i) => return Err(CliError::config(format!("feature index {i} with {d} features"))),
        Err(_) => series
            .feature_names
            .iter()
            .position(|name| *name == a.feature)
            .ok_or_else(|| CliError::config(format!("no feature named {:?}", a.feature)))?,
    };
    let len = a.length.unwrap_or(n.saturating_sub(a.start));
    if len < 2 || a.start + len > n {
        return Err(CliError::config(format!("segment {}+{len} outside {n} rows", a.start)));
    }
    // Empty cells are bridged by linear interpolation before the transform.
    let values = if series.mask.data().iter().any(|&m| m == 0.0) {
        reference_impute(&series, ReferenceImputer::LinearInterp)?
    } else {
        series.values.clone()
    };
    let x: Vec<f64> = (a.start..a.start + len).map(|r| values.data()[r * d + f]).collect();
    let x = Tensor::from_vec(x, &[len]).map_err(spectra_core::Error::from)?;
    let win = match (a.window, a.hop) {
        (None, None) => WindowSpec::for_series(len)?,
        (w, h) => {
            let w = w.unwrap_or_else(|| WindowSpec::for_series(len).map_or(len, |s| s.length()));
            WindowSpec::new(w, h.unwrap_or((w / 2).max(1)))?
        }
    };
    let kind = match a.kind {
        KindArg::Dft => SpectralKind::Dft,
        KindArg::Stft => SpectralKind::Stft,
        KindArg::Frsst => SpectralKind::Frsst,
    };
    let gram = transform(&x, kind, &win)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["frame", "bin", "re", "im"])?;
    for (l, b, re, im) in gram_rows(&gram) {
        w.write_record([l.to_string(), b.to_string(), format!("{re}"), format!("{im}")])?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::data(e.to_string()))?;
    write_atomic(&a.out, &bytes)
}
