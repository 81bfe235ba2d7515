//! Point and probabilistic imputation metrics and simple reference imputers.

use std::fmt;

use serde::{Deserialize, Serialize};
use spectra_tensor::Tensor;

use crate::data::TimeSeriesBatch;
use crate::error::{Error, Result};

/// Denominator guard for MAPE; entries with smaller `|truth|` are skipped.
pub const MAPE_EPS: f64 = 1e-8;

fn check(pred: &Tensor<f64>, truth: &Tensor<f64>, mask: &Tensor<f64>) -> Result<()> {
    if pred.shape() != truth.shape() || truth.shape() != mask.shape() {
        return Err(Error::Eval(format!(
            "prediction {:?}, truth {:?} and mask {:?} are not aligned",
            pred.shape(),
            truth.shape(),
            mask.shape()
        )));
    }
    Ok(())
}

fn masked_pairs<'a>(
    pred: &'a Tensor<f64>,
    truth: &'a Tensor<f64>,
    mask: &'a Tensor<f64>,
) -> Result<impl Iterator<Item = (f64, f64)> + 'a> {
    check(pred, truth, mask)?;
    if !mask.data().iter().any(|&m| m > 0.0) {
        return Err(Error::Eval("evaluation mask is empty".into()));
    }
    Ok(pred
        .data()
        .iter()
        .zip(truth.data())
        .zip(mask.data())
        .filter(|(_, &m)| m > 0.0)
        .map(|((&p, &t), _)| (p, t)))
}

pub fn mae(pred: &Tensor<f64>, truth: &Tensor<f64>, mask: &Tensor<f64>) -> Result<f64> {
    let (sum, n) = masked_pairs(pred, truth, mask)?.fold((0.0, 0usize), |(s, n), (p, t)| (s + (p - t).abs(), n + 1));
    Ok(sum / n as f64)
}

pub fn rmse(pred: &Tensor<f64>, truth: &Tensor<f64>, mask: &Tensor<f64>) -> Result<f64> {
    let (sum, n) = masked_pairs(pred, truth, mask)?.fold((0.0, 0usize), |(s, n), (p, t)| (s + (p - t).powi(2), n + 1));
    Ok((sum / n as f64).sqrt())
}

/// Mean absolute percentage error in percent, and the number of masked
/// entries skipped because `|truth| < MAPE_EPS`.
pub fn mape(pred: &Tensor<f64>, truth: &Tensor<f64>, mask: &Tensor<f64>) -> Result<(f64, usize)> {
    match mape_parts(pred, truth, mask)? {
        (Some(v), skipped) => Ok((v, skipped)),
        (None, _) => Err(Error::Eval("every masked truth value is zero; MAPE undefined".into())),
    }
}

fn mape_parts(pred: &Tensor<f64>, truth: &Tensor<f64>, mask: &Tensor<f64>) -> Result<(Option<f64>, usize)> {
    let mut sum = 0.0;
    let mut n = 0usize;
    let mut skipped = 0usize;
    for (p, t) in masked_pairs(pred, truth, mask)? {
        if t.abs() < MAPE_EPS {
            skipped += 1;
        } else {
            sum += ((p - t) / t).abs();
            n += 1;
        }
    }
    Ok(((n > 0).then(|| 100.0 * sum / n as f64), skipped))
}

/// Sample CRPS of one entry:
/// `(1/K) sum_i |x_i - y| - (1/(2K^2)) sum_i sum_j |x_i - x_j|`.
///
/// `xs` is sorted in place; the pair sum is computed from order statistics.
pub fn crps_entry(xs: &mut [f64], y: f64) -> f64 {
    let k = xs.len() as f64;
    xs.sort_by(f64::total_cmp);
    let spread: f64 = xs.iter().map(|x| (x - y).abs()).sum::<f64>() / k;
    // sum_{i,j} |x_i - x_j| = 2 sum_i (2i - K + 1) x_(i)
    let pairs: f64 = xs
        .iter()
        .enumerate()
        .map(|(i, x)| (2.0 * i as f64 - k + 1.0) * x)
        .sum::<f64>()
        * 2.0;
    spread - pairs / (2.0 * k * k)
}

/// Sample CRPS averaged over masked entries; `samples` is `[K, ...truth]`.
pub fn crps_samples(samples: &Tensor<f64>, truth: &Tensor<f64>, mask: &Tensor<f64>) -> Result<f64> {
    check(truth, truth, mask)?;
    if samples.rank() != truth.rank() + 1 || samples.shape()[1..] != *truth.shape() || samples.dim(0) == 0 {
        return Err(Error::Eval(format!(
            "samples {:?} must be [K, ...] over truth {:?}",
            samples.shape(),
            truth.shape()
        )));
    }
    let k = samples.dim(0);
    let n = truth.numel();
    let mut col = vec![0.0; k];
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, (&y, &m)) in truth.data().iter().zip(mask.data()).enumerate() {
        if m > 0.0 {
            for (j, c) in col.iter_mut().enumerate() {
                *c = samples.data()[j * n + i];
            }
            total += crps_entry(&mut col, y);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Eval("evaluation mask is empty".into()));
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMetrics {
    pub name: String,
    pub n_eval: usize,
    pub mae: Option<f64>,
    pub rmse: Option<f64>,
    pub mape: Option<f64>,
    pub crps: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mae: f64,
    pub rmse: f64,
    /// Percent; `None` when every masked truth value is zero.
    pub mape: Option<f64>,
    pub mape_skipped: usize,
    /// Present when samples were supplied.
    pub crps: Option<f64>,
    pub n_eval: usize,
    pub per_feature: Vec<FeatureMetrics>,
}

fn feature_mask(mask: &Tensor<f64>, feature: usize) -> Result<Tensor<f64>> {
    let d = *mask.shape().last().unwrap_or(&1);
    let data = mask
        .data()
        .iter()
        .enumerate()
        .map(|(i, &m)| if i % d == feature { m } else { 0.0 })
        .collect();
    Ok(Tensor::from_vec(data, mask.shape())?)
}

impl MetricReport {
    /// Scores `pred` against `truth` on `mask [.., D]`, with CRPS when
    /// `samples [K, ..]` is given. Features are the last axis.
    pub fn compute(
        pred: &Tensor<f64>,
        truth: &Tensor<f64>,
        mask: &Tensor<f64>,
        samples: Option<&Tensor<f64>>,
        feature_names: &[String],
    ) -> Result<Self> {
        check(pred, truth, mask)?;
        let d = *truth.shape().last().unwrap_or(&1);
        if feature_names.len() != d {
            return Err(Error::Eval(format!("{} feature names for {d} features", feature_names.len())));
        }
        let mape_of = |m: &Tensor<f64>| mape_parts(pred, truth, m);
        let (mape_all, mape_skipped) = mape_of(mask)?;
        let mut per_feature = Vec::with_capacity(d);
        for (f, name) in feature_names.iter().enumerate() {
            let fm = feature_mask(mask, f)?;
            let n_eval = fm.data().iter().filter(|&&x| x > 0.0).count();
            let row = if n_eval == 0 {
                FeatureMetrics {
                    name: name.clone(),
                    n_eval,
                    mae: None,
                    rmse: None,
                    mape: None,
                    crps: None,
                }
            } else {
                FeatureMetrics {
                    name: name.clone(),
                    n_eval,
                    mae: Some(mae(pred, truth, &fm)?),
                    rmse: Some(rmse(pred, truth, &fm)?),
                    mape: mape_of(&fm)?.0,
                    crps: samples.map(|s| crps_samples(s, truth, &fm)).transpose()?,
                }
            };
            per_feature.push(row);
        }
        Ok(Self {
            mae: mae(pred, truth, mask)?,
            rmse: rmse(pred, truth, mask)?,
            mape: mape_all,
            mape_skipped,
            crps: samples.map(|s| crps_samples(s, truth, mask)).transpose()?,
            n_eval: mask.data().iter().filter(|&&x| x > 0.0).count(),
            per_feature,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"))
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut rows = vec![[
            "feature".to_string(),
            "n".to_string(),
            "mae".to_string(),
            "rmse".to_string(),
            "mape%".to_string(),
            "crps".to_string(),
        ]];
        for r in &self.per_feature {
            rows.push([r.name.clone(), r.n_eval.to_string(), cell(r.mae), cell(r.rmse), cell(r.mape), cell(r.crps)]);
        }
        rows.push([
            "all".to_string(),
            self.n_eval.to_string(),
            cell(Some(self.mae)),
            cell(Some(self.rmse)),
            cell(self.mape),
            cell(self.crps),
        ]);
        let widths: Vec<usize> = (0..6).map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
        for r in &rows {
            let line: Vec<String> = r
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (s, &w))| if c == 0 { format!("{s:<w$}") } else { format!("{s:>w$}") })
                .collect();
            writeln!(f, "{}", line.join("  ").trim_end())?;
        }
        if self.mape_skipped > 0 {
            writeln!(f, "mape skipped {} entries with zero truth", self.mape_skipped)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReferenceImputer {
    Mean,
    Median,
    LinearInterp,
}

impl ReferenceImputer {
    pub const ALL: [ReferenceImputer; 3] = [Self::Mean, Self::Median, Self::LinearInterp];

    pub fn name(self) -> &'static str {
        match self {
            Self::Mean => "mean",
            Self::Median => "median",
            Self::LinearInterp => "linear-interp",
        }
    }
}

impl std::str::FromStr for ReferenceImputer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown reference imputer {s:?}")))
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Fills unobserved entries; observed entries are returned unchanged.
///
/// Mean and median use per-feature statistics over every observed entry of
/// the batch. Linear interpolation works along time within each series and
/// holds the nearest observation flat beyond the first and last ones; it
/// needs two observations per feature across the batch and falls back to the
/// feature mean for a series with none.
pub fn reference_impute(batch: &TimeSeriesBatch, kind: ReferenceImputer) -> Result<Tensor<f64>> {
    let (b, t, d) = (batch.batch(), batch.len(), batch.features());
    let x = batch.values.data();
    let m = batch.mask.data();
    let observed = |f: usize| -> Vec<f64> { (0..b * t).map(|r| r * d + f).filter(|&i| m[i] > 0.0).map(|i| x[i]).collect() };
    let need = if kind == ReferenceImputer::LinearInterp { 2 } else { 1 };
    let mut fill = Vec::with_capacity(d);
    for f in 0..d {
        let obs = observed(f);
        if obs.len() < need {
            return Err(Error::Data(format!(
                "feature {} has {} observations; {} imputation needs {need}",
                batch.feature_names[f],
                obs.len(),
                kind.name()
            )));
        }
        fill.push(match kind {
            ReferenceImputer::Median => median(obs),
            _ => obs.iter().sum::<f64>() / obs.len() as f64,
        });
    }
    let mut out = x.to_vec();
    for s in 0..b {
        for f in 0..d {
            let at = |step: usize| (s * t + step) * d + f;
            let known: Vec<usize> = (0..t).filter(|&step| m[at(step)] > 0.0).collect();
            for step in (0..t).filter(|&step| m[at(step)] == 0.0) {
                out[at(step)] = if kind != ReferenceImputer::LinearInterp || known.is_empty() {
                    fill[f]
                } else {
                    let right = known.partition_point(|&k| k < step);
                    match (right.checked_sub(1).map(|i| known[i]), known.get(right)) {
                        (Some(l), Some(&r)) => {
                            let w = (step - l) as f64 / (r - l) as f64;
                            x[at(l)] + w * (x[at(r)] - x[at(l)])
                        }
                        (Some(l), None) => x[at(l)],
                        (None, Some(&r)) => x[at(r)],
                        (None, None) => unreachable!(),
                    }
                };
            }
        }
    }
    Ok(Tensor::from_vec(out, batch.values.shape())?)
}
