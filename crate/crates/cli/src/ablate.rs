//! The variant grid: every frequency module crossed with every backbone,
//! trained and scored on shared seeds and masks.

use std::fmt;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;
use sha2::{Digest, Sha256};
use spectra_core::data::{apply_mask, write_mask_csv, MaskedBatch};
use spectra_core::denoiser::Backbone;
use spectra_core::fbp::FbpKind;

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::experiment::{evaluate_masked, prepare, train, Splits};
use crate::io::write_atomic;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Variant {
    pub fbp: FbpKind,
    pub backbone: Backbone,
}

impl Variant {
    /// Frequency modules outer, backbones inner.
    pub fn all() -> Vec<Variant> {
        FbpKind::ALL
            .iter()
            .flat_map(|&fbp| Backbone::ALL.iter().map(move |&backbone| Variant { fbp, backbone }))
            .collect()
    }

    pub fn name(&self) -> String {
        format!("{}-{}", self.fbp.name(), self.backbone.name())
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for Variant {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::all()
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| CliError::config(format!("unknown variant {s:?}; expected <none|dft|stft|frsst>-<attention|conv>")))
    }
}

/// `all` or a comma-separated list of variant names without repeats.
pub fn parse_grid(text: &str) -> Result<Vec<Variant>> {
    if text.trim() == "all" {
        return Ok(Variant::all());
    }
    let mut grid = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let v: Variant = part.parse()?;
        if grid.contains(&v) {
            return Err(CliError::config(format!("variant {v} listed twice")));
        }
        grid.push(v);
    }
    if grid.is_empty() {
        return Err(CliError::config("empty variant grid"));
    }
    Ok(grid)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellMetrics {
    pub mae: f64,
    pub rmse: f64,
    pub mape: Option<f64>,
    pub crps: Option<f64>,
    pub best_epoch: usize,
    pub final_train_loss: f64,
}

/// One variant trained and scored under one seed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Cell {
    pub variant: String,
    pub seed: u64,
    pub mask_hash: String,
    #[serde(flatten)]
    pub outcome: CellOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum CellOutcome {
    Ok(CellMetrics),
    Failed { error: String },
}

/// Median metrics of one variant over the seeds where it succeeded.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub rank: Option<usize>,
    pub variant: String,
    pub fbp: String,
    pub backbone: String,
    pub runs: usize,
    pub failed: usize,
    pub mae: Option<f64>,
    pub rmse: Option<f64>,
    pub mape: Option<f64>,
    pub crps: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Ablation {
    pub config: RunConfig,
    pub grid: Vec<String>,
    pub seeds: Vec<u64>,
    pub cells: Vec<Cell>,
    /// Ranked by median MAE; variants without a successful run come last.
    pub summary: Vec<Summary>,
}

pub fn mask_hash(masked: &MaskedBatch) -> Result<(String, Vec<u8>)> {
    let mut bytes = Vec::new();
    write_mask_csv(&masked.eval_mask, &mut bytes)?;
    Ok((format!("{:x}", Sha256::digest(&bytes)), bytes))
}

fn median(mut xs: Vec<f64>) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    Some(if n % 2 == 1 { xs[n / 2] } else { 0.5 * (xs[n / 2 - 1] + xs[n / 2]) })
}

fn run_cell(cfg: &RunConfig, splits: &Splits, masked: &MaskedBatch) -> Result<CellMetrics> {
    cfg.validate()?;
    let trained = train(cfg, splits, |_| {})?;
    let eval = evaluate_masked(
        cfg,
        &trained.model,
        &trained.outcome.params,
        &splits.normalizer,
        masked.clone(),
        &cfg.sampling,
        cfg.seed(),
    )?;
    Ok(CellMetrics {
        mae: eval.report.mae,
        rmse: eval.report.rmse,
        mape: eval.report.mape,
        crps: eval.report.crps,
        best_epoch: trained.outcome.best_epoch,
        final_train_loss: trained.outcome.log.last().map_or(f64::NAN, |e| e.train_loss),
    })
}

/// Trains and scores every variant under every seed.
///
/// For a seed, all variants share the parameter seed, the training seed and
/// one test mask. A failing cell is recorded and the rest continue. When
/// `masks_dir` is given each seed's mask is written there as
/// `seed<seed>.csv`.
pub fn run_ablation(
    base: &RunConfig,
    grid: &[Variant],
    seeds: &[u64],
    masks_dir: Option<&Path>,
    mut on_cell: impl FnMut(&Cell),
) -> Result<Ablation> {
    if grid.is_empty() || seeds.is_empty() {
        return Err(CliError::config("ablation needs at least one variant and one seed"));
    }
    let mut cells = Vec::new();
    for &seed in seeds {
        let mut cfg = base.clone();
        cfg.seed = Some(seed);
        cfg.train.seed = seed;
        cfg.mask.seed = seed;
        cfg.validate()?;
        let splits = prepare(&cfg)?;
        let masked = apply_mask(&splits.test, &cfg.mask)?;
        let (shared_hash, bytes) = mask_hash(&masked)?;
        if let Some(dir) = masks_dir {
            write_atomic(&dir.join(format!("seed{seed}.csv")), &bytes)?;
        }
        for v in grid {
            let mut cell_cfg = cfg.clone();
            cell_cfg.model.fbp = v.fbp;
            cell_cfg.model.backbone = v.backbone;
            let outcome = match catch_unwind(AssertUnwindSafe(|| run_cell(&cell_cfg, &splits, &masked))) {
                Ok(Ok(m)) => CellOutcome::Ok(m),
                Ok(Err(e)) => CellOutcome::Failed { error: e.to_string() },
                Err(panic) => CellOutcome::Failed {
                    error: panic
                        .downcast_ref::<String>()
                        .cloned()
                        .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                        .unwrap_or_else(|| "panicked".into()),
                },
            };
            let cell = Cell {
                variant: v.name(),
                seed,
                mask_hash: mask_hash(&masked)?.0,
                outcome,
            };
            debug_assert_eq!(cell.mask_hash, shared_hash);
            on_cell(&cell);
            cells.push(cell);
        }
    }
    let mut summary: Vec<Summary> = grid
        .iter()
        .map(|v| {
            let ok: Vec<&CellMetrics> = cells
                .iter()
                .filter(|c| c.variant == v.name())
                .filter_map(|c| match &c.outcome {
                    CellOutcome::Ok(m) => Some(m),
                    CellOutcome::Failed { .. } => None,
                })
                .collect();
            let med = |f: &dyn Fn(&CellMetrics) -> Option<f64>| median(ok.iter().filter_map(|m| f(m)).collect());
            Summary {
                rank: None,
                variant: v.name(),
                fbp: v.fbp.name().into(),
                backbone: v.backbone.name().into(),
                runs: ok.len(),
                failed: seeds.len() - ok.len(),
                mae: med(&|m| Some(m.mae)),
                rmse: med(&|m| Some(m.rmse)),
                mape: med(&|m| m.mape),
                crps: med(&|m| m.crps),
            }
        })
        .collect();
    summary.sort_by(|a, b| match (a.mae, b.mae) {
        (Some(x), Some(y)) => x.total_cmp(&y),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
    for (i, s) in summary.iter_mut().enumerate() {
        s.rank = s.mae.map(|_| i + 1);
    }
    Ok(Ablation {
        config: base.clone(),
        grid: grid.iter().map(Variant::name).collect(),
        seeds: seeds.to_vec(),
        cells,
        summary,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x}"))
}

impl Ablation {
    pub fn summary(&self, variant: &str) -> Option<&Summary> {
        self.summary.iter().find(|s| s.variant == variant)
    }

    /// One row per variant in grid order with median metrics.
    pub fn table_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["variant", "fbp", "backbone", "runs", "failed", "mae", "rmse", "mape", "crps"])?;
        for name in &self.grid {
            let s = self.summary(name).expect("every grid variant is summarized");
            w.write_record([
                s.variant.clone(),
                s.fbp.clone(),
                s.backbone.clone(),
                s.runs.to_string(),
                s.failed.to_string(),
                opt(s.mae),
                opt(s.rmse),
                opt(s.mape),
                opt(s.crps),
            ])?;
        }
        w.into_inner().map_err(|e| CliError::data(e.to_string()))
    }

    /// One row per cell, including failures and mask hashes.
    pub fn runs_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["variant", "seed", "status", "mae", "rmse", "mape", "crps", "mask_hash", "error"])?;
        for c in &self.cells {
            let (status, m, err) = match &c.outcome {
                CellOutcome::Ok(m) => ("ok", Some(m), String::new()),
                CellOutcome::Failed { error } => ("failed", None, error.clone()),
            };
            w.write_record([
                c.variant.clone(),
                c.seed.to_string(),
                status.to_string(),
                opt(m.map(|m| m.mae)),
                opt(m.map(|m| m.rmse)),
                opt(m.and_then(|m| m.mape)),
                opt(m.and_then(|m| m.crps)),
                c.mask_hash.clone(),
                err,
            ])?;
        }
        w.into_inner().map_err(|e| CliError::data(e.to_string()))
    }

    /// Aligned text ranking.
    pub fn ranked_text(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        let mut rows = vec![["rank", "variant", "mae", "rmse", "crps", "runs"].map(String::from).to_vec()];
        for s in &self.summary {
            rows.push(vec![
                s.rank.map_or_else(|| "-".into(), |r| r.to_string()),
                s.variant.clone(),
                fmt(s.mae),
                fmt(s.rmse),
                fmt(s.crps),
                format!("{}/{}", s.runs, s.runs + s.failed),
            ]);
        }
        let widths: Vec<usize> = (0..6).map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for r in &rows {
            let line: Vec<String> = r
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (s, &w))| if i == 1 { format!("{s:<w$}") } else { format!("{s:>w$}") })
                .collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
        }
        for c in &self.cells {
            if let CellOutcome::Failed { error } = &c.outcome {
                out.push_str(&format!("{} seed {} failed: {error}\n", c.variant, c.seed));
            }
        }
        out
    }
}
