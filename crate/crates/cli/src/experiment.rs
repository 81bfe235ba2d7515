//! Data preparation, training and test-split evaluation shared by the
//! commands and the benchmark suite.

use spectra_core::data::{
    apply_mask, load_csv, synth_dataset, window, MaskSpec, MaskedBatch, Normalizer, SynthSpec, TimeSeriesBatch,
};
use spectra_core::denoiser::{Denoiser, DenoiserParams};
use spectra_core::diffusion::{impute, ImputationResult, NoiseSchedule, SamplingConfig};
use spectra_core::evaluate::{mae, reference_impute, MetricReport, ReferenceImputer};
use spectra_core::train::{fit, EpochLog, TrainOutcome};
use spectra_tensor::Tensor;

use crate::config::{DataConfig, DataSource, RunConfig};
use crate::error::{CliError, Result};

/// The full source series `[1, N, D]`.
pub fn load_series(cfg: &DataConfig) -> Result<TimeSeriesBatch> {
    Ok(match &cfg.source {
        DataSource::Csv { path } => load_csv(path)?,
        DataSource::Synth(spec) => synth_dataset(spec)?,
        DataSource::SynthRandom {
            features,
            length,
            period,
            seed,
        } => synth_dataset(&SynthSpec::random(*features, *length, *period, *seed))?,
    })
}

/// Windowed splits. Train and validation windows are normalized with
/// statistics of the training rows; test windows keep source units.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: TimeSeriesBatch,
    pub val: Option<TimeSeriesBatch>,
    pub test: TimeSeriesBatch,
    pub normalizer: Normalizer,
}

fn rows(series: &TimeSeriesBatch, start: usize, len: usize) -> Result<TimeSeriesBatch> {
    let d = series.features();
    let pick = |t: &Tensor<f64>| -> Result<Tensor<f64>> {
        let data = t.data()[start * d..(start + len) * d].to_vec();
        Ok(Tensor::from_vec(data, &[1, len, d]).map_err(spectra_core::Error::from)?)
    };
    Ok(TimeSeriesBatch::new(
        pick(&series.values)?,
        pick(&series.mask)?,
        series.timestamps[start..start + len].to_vec(),
        vec![0],
        series.feature_names.clone(),
    )?)
}

pub fn prepare(cfg: &RunConfig) -> Result<Splits> {
    let series = load_series(&cfg.data)?;
    split_series(cfg, &series)
}

pub fn split_series(cfg: &RunConfig, series: &TimeSeriesBatch) -> Result<Splits> {
    if series.features() != cfg.model.features {
        return Err(CliError::config(format!(
            "data has {} features but the model expects {}",
            series.features(),
            cfg.model.features
        )));
    }
    let t = cfg.model.seq_len;
    let n = series.len();
    let split = cfg.data.split;
    let n_train = (split.train * n as f64).round() as usize;
    let n_val = (split.val * n as f64).round() as usize;
    let n_test = n.saturating_sub(n_train + n_val);
    if n_train < t || n_test < t || (n_val > 0 && n_val < t) {
        return Err(CliError::data(format!(
            "{n} rows split {n_train}/{n_val}/{n_test} leave a part shorter than one window of {t}"
        )));
    }
    let train_rows = rows(series, 0, n_train)?;
    let normalizer = Normalizer::fit(&train_rows)?;
    let stride = cfg.data.train_stride.unwrap_or(t);
    let train = normalizer.normalize(&window(&train_rows, t, stride)?)?;
    let val = if n_val > 0 {
        Some(normalizer.normalize(&window(&rows(series, n_train, n_val)?, t, t)?)?)
    } else {
        None
    };
    let test = window(&rows(series, n_train + n_val, n_test)?, t, t)?;
    Ok(Splits {
        train,
        val,
        test,
        normalizer,
    })
}

pub struct Trained {
    pub model: Denoiser<f32>,
    pub outcome: TrainOutcome<f32>,
}

pub fn train(cfg: &RunConfig, splits: &Splits, on_epoch: impl FnMut(&EpochLog)) -> Result<Trained> {
    let model = Denoiser::<f32>::new(cfg.model.clone())?;
    let sched = NoiseSchedule::new(&cfg.schedule)?;
    let init = model.init_params(cfg.seed())?;
    let val = splits.val.as_ref().filter(|_| cfg.train.validate_every > 0);
    let outcome = fit(&model, init, &splits.train, val, &sched, &cfg.train, on_epoch)?;
    Ok(Trained { model, outcome })
}

/// Imputation of a masked test split, in source units.
pub struct Evaluation {
    pub masked: MaskedBatch,
    pub imputation: ImputationResult<f64>,
    pub report: MetricReport,
    pub baselines: Vec<(ReferenceImputer, MetricReport)>,
}

/// Fills the missing entries of `batch` (source units) with `K` samples.
pub fn impute_batch(
    cfg: &RunConfig,
    model: &Denoiser<f32>,
    params: &DenoiserParams<f32>,
    normalizer: &Normalizer,
    batch: &TimeSeriesBatch,
    sampling: &SamplingConfig,
    seed: u64,
) -> Result<ImputationResult<f64>> {
    let sched = NoiseSchedule::new(&cfg.schedule)?;
    let x = normalizer.normalize(batch)?;
    let res = impute(
        model,
        params,
        &x.values.cast::<f32>(),
        &x.mask.cast::<f32>(),
        &sched,
        sampling,
        seed,
    )?;
    let restore = |t: &Tensor<f32>| -> Result<Tensor<f64>> {
        let units = normalizer.denormalize_values(&t.cast::<f64>())?;
        // Observed entries come back exactly as given.
        Ok(keep_observed(&units, batch)?)
    };
    Ok(ImputationResult {
        samples: restore(&res.samples)?,
        mean: restore(&res.mean)?,
        quantiles: res
            .quantiles
            .iter()
            .map(|(q, t)| Ok((*q, restore(t)?)))
            .collect::<Result<_>>()?,
    })
}

/// Copies observed values of `batch` into every `[B, T, D]` slab of `t`.
fn keep_observed(t: &Tensor<f64>, batch: &TimeSeriesBatch) -> spectra_core::Result<Tensor<f64>> {
    let (v, m) = (batch.values.data(), batch.mask.data());
    let n = v.len();
    let data = t
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| if m[i % n] > 0.0 { v[i % n] } else { x })
        .collect();
    Ok(Tensor::from_vec(data, t.shape())?)
}

/// Masks `test` with `mask`, imputes with the model, and scores the hidden
/// entries against the model and the reference imputers.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    cfg: &RunConfig,
    model: &Denoiser<f32>,
    params: &DenoiserParams<f32>,
    normalizer: &Normalizer,
    test: &TimeSeriesBatch,
    mask: &MaskSpec,
    sampling: &SamplingConfig,
    seed: u64,
) -> Result<Evaluation> {
    let masked = apply_mask(test, mask)?;
    evaluate_masked(cfg, model, params, normalizer, masked, sampling, seed)
}

/// [`evaluate`] on an already masked batch.
pub fn evaluate_masked(
    cfg: &RunConfig,
    model: &Denoiser<f32>,
    params: &DenoiserParams<f32>,
    normalizer: &Normalizer,
    masked: MaskedBatch,
    sampling: &SamplingConfig,
    seed: u64,
) -> Result<Evaluation> {
    let imputation = impute_batch(cfg, model, params, normalizer, &masked.batch, sampling, seed)?;
    let names = &masked.batch.feature_names;
    let report = MetricReport::compute(
        &imputation.mean,
        &masked.truth,
        &masked.eval_mask,
        Some(&imputation.samples),
        names,
    )?;
    let baselines = ReferenceImputer::ALL
        .iter()
        .map(|&kind| {
            let pred = reference_impute(&masked.batch, kind)?;
            Ok((kind, MetricReport::compute(&pred, &masked.truth, &masked.eval_mask, None, names)?))
        })
        .collect::<Result<_>>()?;
    Ok(Evaluation {
        masked,
        imputation,
        report,
        baselines,
    })
}

/// MAE of the mean over the first `k` samples, for each `k` in `ks`.
pub fn mae_by_samples(samples: &Tensor<f64>, truth: &Tensor<f64>, mask: &Tensor<f64>, ks: &[usize]) -> Result<Vec<f64>> {
    let total = samples.dim(0);
    let n = truth.numel();
    ks.iter()
        .map(|&k| {
            if k == 0 || k > total {
                return Err(CliError::config(format!("{k} samples requested from {total}")));
            }
            let mut mean = vec![0.0; n];
            for chunk in samples.data().chunks(n).take(k) {
                for (m, &v) in mean.iter_mut().zip(chunk) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= k as f64);
            let mean = Tensor::from_vec(mean, truth.shape()).map_err(spectra_core::Error::from)?;
            Ok(mae(&mean, truth, mask)?)
        })
        .collect()
}
