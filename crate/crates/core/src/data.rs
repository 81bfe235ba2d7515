//! Series containers, CSV input/output, windowing, synthetic series,
//! evaluation masks and normalization.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use spectra_tensor::Tensor;

use crate::error::{Error, Result};

/// `B` aligned series of `T` steps and `D` features.
///
/// Values are zero wherever the mask is zero. `timestamps` labels the rows of
/// the source series and `offsets[b]` is the source row of step 0 of series
/// `b`.
#[derive(Debug, Clone)]
pub struct TimeSeriesBatch {
    pub values: Tensor<f64>,
    pub mask: Tensor<f64>,
    pub timestamps: Vec<String>,
    pub offsets: Vec<usize>,
    pub feature_names: Vec<String>,
}

impl TimeSeriesBatch {
    /// Builds a batch, zero-filling values outside the mask.
    pub fn new(
        values: Tensor<f64>,
        mask: Tensor<f64>,
        timestamps: Vec<String>,
        offsets: Vec<usize>,
        feature_names: Vec<String>,
    ) -> Result<Self> {
        let (b, t, d) = match *values.shape() {
            [b, t, d] => (b, t, d),
            _ => return Err(Error::Data(format!("values must be [B, T, D], got {:?}", values.shape()))),
        };
        if mask.shape() != values.shape() {
            return Err(Error::Data(format!("mask {:?} does not match values {:?}", mask.shape(), values.shape())));
        }
        if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::Data("mask entries must be 0 or 1".into()));
        }
        if feature_names.len() != d || offsets.len() != b {
            return Err(Error::Data(format!(
                "{} feature names and {} offsets for shape {:?}",
                feature_names.len(),
                offsets.len(),
                values.shape()
            )));
        }
        if offsets.iter().any(|&o| o + t > timestamps.len()) {
            return Err(Error::Data("offsets run past the timestamp labels".into()));
        }
        let mut v = values.to_vec();
        for (x, &m) in v.iter_mut().zip(mask.data()) {
            if m == 0.0 {
                *x = 0.0;
            } else if !x.is_finite() {
                return Err(Error::Data("observed value is not finite".into()));
            }
        }
        Ok(Self {
            values: Tensor::from_vec(v, values.shape())?,
            mask,
            timestamps,
            offsets,
            feature_names,
        })
    }

    /// Fully observed single series `[1, T, D]` with index timestamps.
    pub fn from_rows(rows: &[Vec<f64>], feature_names: Vec<String>) -> Result<Self> {
        let t = rows.len();
        let d = feature_names.len();
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        if flat.len() != t * d {
            return Err(Error::Data("ragged rows".into()));
        }
        Self::new(
            Tensor::from_vec(flat, &[1, t, d])?,
            Tensor::ones(&[1, t, d]),
            (0..t).map(|i| i.to_string()).collect(),
            vec![0],
            feature_names,
        )
    }

    pub fn batch(&self) -> usize {
        self.values.dim(0)
    }

    pub fn len(&self) -> usize {
        self.values.dim(1)
    }

    pub fn is_empty(&self) -> bool {
        self.values.numel() == 0
    }

    pub fn features(&self) -> usize {
        self.values.dim(2)
    }

    /// Series `start..start+count` as a new batch.
    pub fn slice(&self, start: usize, count: usize) -> Result<Self> {
        Ok(Self {
            values: self.values.narrow(0, start, count)?,
            mask: self.mask.narrow(0, start, count)?,
            timestamps: self.timestamps.clone(),
            offsets: self.offsets[start..start + count].to_vec(),
            feature_names: self.feature_names.clone(),
        })
    }

    /// Series picked by index, in the given order.
    pub fn select(&self, picks: &[usize]) -> Result<Self> {
        let per = self.len() * self.features();
        let mut v = Vec::with_capacity(picks.len() * per);
        let mut m = Vec::with_capacity(picks.len() * per);
        for &p in picks {
            v.extend_from_slice(&self.values.data()[p * per..(p + 1) * per]);
            m.extend_from_slice(&self.mask.data()[p * per..(p + 1) * per]);
        }
        let shape = [picks.len(), self.len(), self.features()];
        Ok(Self {
            values: Tensor::from_vec(v, &shape)?,
            mask: Tensor::from_vec(m, &shape)?,
            timestamps: self.timestamps.clone(),
            offsets: picks.iter().map(|&p| self.offsets[p]).collect(),
            feature_names: self.feature_names.clone(),
        })
    }
}

fn parse_cell(cell: &str, row: usize, col: usize) -> Result<Option<f64>> {
    let cell = cell.trim();
    if cell.is_empty() || cell.eq_ignore_ascii_case("nan") {
        return Ok(None);
    }
    match cell.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Some(v)),
        _ => Err(Error::Data(format!("row {row}, column {col}: cannot parse {cell:?} as a number"))),
    }
}

/// Reads a CSV with a header. The timestamp column is the one named `date`,
/// otherwise the first; every other column is a numeric feature and empty
/// cells are missing. Rows are sorted by timestamp (numerically when every
/// label is a number, otherwise as text, which orders ISO-8601 dates);
/// repeated timestamps are an error.
pub fn read_csv(reader: impl Read) -> Result<TimeSeriesBatch> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.len() < 2 {
        return Err(Error::Data("need a timestamp column and at least one feature".into()));
    }
    let ts_col = header.iter().position(|h| h.trim() == "date").unwrap_or(0);
    let names: Vec<String> = header
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != ts_col)
        .map(|(_, h)| h.trim().to_string())
        .collect();
    let mut rows: Vec<(String, Vec<Option<f64>>)> = Vec::new();
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        let line = r + 2;
        if record.len() != header.len() {
            return Err(Error::Data(format!("row {line}: {} cells, expected {}", record.len(), header.len())));
        }
        let mut cells = Vec::with_capacity(names.len());
        for (c, cell) in record.iter().enumerate() {
            if c != ts_col {
                cells.push(parse_cell(cell, line, c + 1)?);
            }
        }
        rows.push((record[ts_col].trim().to_string(), cells));
    }
    if rows.is_empty() {
        return Err(Error::Data("no data rows".into()));
    }
    let numeric: Option<Vec<f64>> = rows.iter().map(|(t, _)| t.parse::<f64>().ok()).collect();
    match numeric {
        Some(keys) => {
            let mut order: Vec<usize> = (0..rows.len()).collect();
            order.sort_by(|&a, &b| keys[a].total_cmp(&keys[b]));
            rows = order.into_iter().map(|i| rows[i].clone()).collect();
        }
        None => rows.sort_by(|a, b| a.0.cmp(&b.0)),
    }
    let mut seen = HashSet::new();
    for (t, _) in &rows {
        if !seen.insert(t.as_str()) {
            return Err(Error::Data(format!("timestamp {t:?} appears more than once")));
        }
    }
    let (t, d) = (rows.len(), names.len());
    let mut values = Vec::with_capacity(t * d);
    let mut mask = Vec::with_capacity(t * d);
    for (_, cells) in &rows {
        for c in cells {
            values.push(c.unwrap_or(0.0));
            mask.push(if c.is_some() { 1.0 } else { 0.0 });
        }
    }
    TimeSeriesBatch::new(
        Tensor::from_vec(values, &[1, t, d])?,
        Tensor::from_vec(mask, &[1, t, d])?,
        rows.into_iter().map(|(t, _)| t).collect(),
        vec![0],
        names,
    )
}

pub fn load_csv(path: &Path) -> Result<TimeSeriesBatch> {
    let file = std::fs::File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    read_csv(file)
}

/// Writes every series of the batch one after another under a `date`
/// header; missing entries are empty cells. Values use the shortest
/// representation that reads back to the same `f64`.
pub fn write_csv(batch: &TimeSeriesBatch, writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["date".to_string()];
    header.extend(batch.feature_names.iter().cloned());
    w.write_record(&header)?;
    let (t, d) = (batch.len(), batch.features());
    for b in 0..batch.batch() {
        for step in 0..t {
            let mut record = vec![batch.timestamps[batch.offsets[b] + step].clone()];
            for f in 0..d {
                let i = (b * t + step) * d + f;
                record.push(if batch.mask.data()[i] > 0.0 {
                    format!("{}", batch.values.data()[i])
                } else {
                    String::new()
                });
            }
            w.write_record(&record)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Length-`t` segments taken every `stride` steps from each series; the
/// trailing remainder is dropped.
pub fn window(batch: &TimeSeriesBatch, t: usize, stride: usize) -> Result<TimeSeriesBatch> {
    if stride == 0 || t == 0 {
        return Err(Error::Data("window length and stride must be positive".into()));
    }
    let (len, d) = (batch.len(), batch.features());
    if t > len {
        return Err(Error::Data(format!("window {t} longer than series of {len} steps")));
    }
    let starts: Vec<usize> = (0..=len - t).step_by(stride).collect();
    let mut values = Vec::with_capacity(batch.batch() * starts.len() * t * d);
    let mut mask = Vec::with_capacity(values.capacity());
    let mut offsets = Vec::new();
    for b in 0..batch.batch() {
        for &s in &starts {
            let range = (b * len + s) * d..(b * len + s + t) * d;
            values.extend_from_slice(&batch.values.data()[range.clone()]);
            mask.extend_from_slice(&batch.mask.data()[range]);
            offsets.push(batch.offsets[b] + s);
        }
    }
    let shape = [offsets.len(), t, d];
    TimeSeriesBatch::new(
        Tensor::from_vec(values, &shape)?,
        Tensor::from_vec(mask, &shape)?,
        batch.timestamps.clone(),
        offsets,
        batch.feature_names.clone(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sinusoid {
    /// Cycles per `period` steps.
    pub freq: f64,
    pub amp: f64,
    #[serde(default)]
    pub phase: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthFeature {
    pub sinusoids: Vec<Sinusoid>,
    /// Polynomial coefficients in `u = t / length`, constant term first.
    #[serde(default)]
    pub trend: Vec<f64>,
}

/// `x[t, d] = sum_j a_j sin(2 pi f_j t / period + phi_j) + trend_d(t / length) + noise`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub length: usize,
    pub period: usize,
    pub features: Vec<SynthFeature>,
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SynthSpec {
    /// Random mixture for `features` series: two or three sinusoids with
    /// integer cycle counts per `period`, a quadratic trend and light noise.
    pub fn random(features: usize, length: usize, period: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let max_cycles = (period / 6).max(2);
        let features = (0..features)
            .map(|_| {
                let n = rng.gen_range(2..=3);
                let sinusoids = (0..n)
                    .map(|_| Sinusoid {
                        freq: rng.gen_range(1..=max_cycles) as f64,
                        amp: rng.gen_range(0.5..1.5),
                        phase: rng.gen_range(0.0..2.0 * PI),
                    })
                    .collect();
                let trend = vec![rng.gen_range(-1.0..1.0), rng.gen_range(-2.0..2.0), rng.gen_range(-1.0..1.0)];
                SynthFeature { sinusoids, trend }
            })
            .collect();
        Self {
            length,
            period,
            features,
            noise_std: 0.1,
            seed,
        }
    }
}

/// Fully observed synthetic series `[1, length, D]`.
pub fn synth_dataset(spec: &SynthSpec) -> Result<TimeSeriesBatch> {
    if spec.length == 0 || spec.period == 0 || spec.features.is_empty() {
        return Err(Error::Data("synthetic series needs a length, a period and features".into()));
    }
    if !(spec.noise_std >= 0.0 && spec.noise_std.is_finite()) {
        return Err(Error::Data(format!("noise stddev {} is invalid", spec.noise_std)));
    }
    let bad = spec.features.iter().any(|f| {
        f.trend.iter().any(|c| !c.is_finite())
            || f.sinusoids.iter().any(|s| !(s.freq.is_finite() && s.amp.is_finite() && s.phase.is_finite()))
    });
    if bad {
        return Err(Error::Data("synthetic series parameters must be finite".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.features.len();
    let mut rows = Vec::with_capacity(spec.length);
    for t in 0..spec.length {
        let u = t as f64 / spec.length as f64;
        let mut row = Vec::with_capacity(d);
        for f in &spec.features {
            let mut v: f64 = f
                .sinusoids
                .iter()
                .map(|s| s.amp * (2.0 * PI * s.freq * t as f64 / spec.period as f64 + s.phase).sin())
                .sum();
            v += f.trend.iter().rev().fold(0.0, |acc, c| acc * u + c);
            if spec.noise_std > 0.0 {
                let z: f64 = rng.sample(StandardNormal);
                v += spec.noise_std * z;
            }
            row.push(v);
        }
        rows.push(row);
    }
    TimeSeriesBatch::from_rows(&rows, (0..d).map(|i| format!("x{i}")).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MissingPattern {
    Pointwise,
    Timewise,
}

/// Evaluation-time missingness.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSpec {
    pub pattern: MissingPattern,
    pub rate: f64,
    /// Block length bounds for the time-wise pattern; `T/12` and `T/6` when unset.
    #[serde(default)]
    pub block_min: Option<usize>,
    #[serde(default)]
    pub block_max: Option<usize>,
    /// Time-wise blocks shared by every feature of a series.
    #[serde(default)]
    pub aligned: bool,
    #[serde(default)]
    pub seed: u64,
}

impl MaskSpec {
    pub fn pointwise(rate: f64, seed: u64) -> Self {
        Self {
            pattern: MissingPattern::Pointwise,
            rate,
            block_min: None,
            block_max: None,
            aligned: false,
            seed,
        }
    }

    pub fn timewise(rate: f64, seed: u64) -> Self {
        Self {
            pattern: MissingPattern::Timewise,
            ..Self::pointwise(rate, seed)
        }
    }

    fn block_bounds(&self, t: usize) -> Result<(usize, usize)> {
        let lo = self.block_min.unwrap_or((t / 12).max(1));
        let hi = self.block_max.unwrap_or((t / 6).max(lo));
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("block lengths [{lo}, {hi}] are invalid")));
        }
        Ok((lo, hi))
    }
}

/// A batch with extra entries hidden, the indicator of those entries and
/// the full values they were taken from.
#[derive(Debug, Clone)]
pub struct MaskedBatch {
    pub batch: TimeSeriesBatch,
    pub eval_mask: Tensor<f64>,
    pub truth: Tensor<f64>,
}

fn round_count(rate: f64, n: usize) -> usize {
    (rate * n as f64).round() as usize
}

/// Hides observed entries according to `spec`.
///
/// Point-wise: exactly `round(rate * observed)` entries of the whole batch,
/// uniformly without replacement. Time-wise: for every series and feature,
/// non-overlapping blocks with lengths uniform in the configured bounds
/// until `round(rate * observed)` entries of that feature are hidden (the
/// last block is cut short to hit the count). Only integer draws are used,
/// so masks are identical across platforms.
pub fn apply_mask(batch: &TimeSeriesBatch, spec: &MaskSpec) -> Result<MaskedBatch> {
    if !(spec.rate > 0.0 && spec.rate < 1.0) {
        return Err(Error::Config(format!("missing rate {} outside (0, 1)", spec.rate)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let observed = batch.mask.data();
    let mut hide = vec![false; observed.len()];
    match spec.pattern {
        MissingPattern::Pointwise => {
            let obs: Vec<usize> = (0..observed.len()).filter(|&i| observed[i] > 0.0).collect();
            let count = round_count(spec.rate, obs.len());
            for pick in index::sample(&mut rng, obs.len(), count) {
                hide[obs[pick]] = true;
            }
        }
        MissingPattern::Timewise => {
            let (t, d) = (batch.len(), batch.features());
            let bounds = spec.block_bounds(t)?;
            for b in 0..batch.batch() {
                let at = |step: usize, f: usize| (b * t + step) * d + f;
                if spec.aligned {
                    let obs: Vec<bool> = (0..t).map(|s| (0..d).any(|f| observed[at(s, f)] > 0.0)).collect();
                    let rows = hide_blocks(&obs, round_count(spec.rate, obs.iter().filter(|&&o| o).count()), bounds, &mut rng);
                    for (s, &h) in rows.iter().enumerate() {
                        for f in 0..d {
                            hide[at(s, f)] = h && observed[at(s, f)] > 0.0;
                        }
                    }
                } else {
                    for f in 0..d {
                        let obs: Vec<bool> = (0..t).map(|s| observed[at(s, f)] > 0.0).collect();
                        let count = round_count(spec.rate, obs.iter().filter(|&&o| o).count());
                        for (s, h) in hide_blocks(&obs, count, bounds, &mut rng).into_iter().enumerate() {
                            hide[at(s, f)] = h;
                        }
                    }
                }
            }
        }
    }
    let eval: Vec<f64> = hide.iter().map(|&h| if h { 1.0 } else { 0.0 }).collect();
    let mask: Vec<f64> = observed.iter().zip(&hide).map(|(&m, &h)| if h { 0.0 } else { m }).collect();
    let shape = batch.values.shape();
    Ok(MaskedBatch {
        batch: TimeSeriesBatch::new(
            batch.values.clone(),
            Tensor::from_vec(mask, shape)?,
            batch.timestamps.clone(),
            batch.offsets.clone(),
            batch.feature_names.clone(),
        )?,
        eval_mask: Tensor::from_vec(eval, shape)?,
        truth: batch.values.clone(),
    })
}

/// Marks blocks over a length-`t` line until `count` observed positions are
/// covered. Random placements must not overlap earlier blocks; after too
/// many rejections the remaining count is taken from the longest free run.
fn hide_blocks(observed: &[bool], count: usize, (lo, hi): (usize, usize), rng: &mut ChaCha8Rng) -> Vec<bool> {
    let t = observed.len();
    let mut taken = vec![false; t];
    let mut hidden = 0;
    let mut rejections = 0;
    let cover = |taken: &mut [bool], start: usize, len: usize, hidden: &mut usize| {
        for p in start..start + len {
            if *hidden == count {
                break;
            }
            taken[p] = true;
            if observed[p] {
                *hidden += 1;
            }
        }
    };
    while hidden < count {
        if rejections < 1000 {
            let len = rng.gen_range(lo..=hi).min(t);
            let start = rng.gen_range(0..=t - len);
            if taken[start..start + len].iter().any(|&x| x) {
                rejections += 1;
                continue;
            }
            cover(&mut taken, start, len, &mut hidden);
        } else {
            let free = longest_free_run(&taken, observed);
            match free {
                Some((start, len)) => cover(&mut taken, start, len, &mut hidden),
                None => break,
            }
        }
    }
    taken.iter().zip(observed).map(|(&k, &o)| k && o).collect()
}

fn longest_free_run(taken: &[bool], observed: &[bool]) -> Option<(usize, usize)> {
    let mut best: Option<(usize, usize)> = None;
    let mut start = 0;
    while start < taken.len() {
        if taken[start] {
            start += 1;
            continue;
        }
        let mut end = start;
        while end < taken.len() && !taken[end] {
            end += 1;
        }
        let useful = observed[start..end].iter().any(|&o| o);
        if useful && best.map_or(true, |(_, l)| end - start > l) {
            best = Some((start, end - start));
        }
        start = end;
    }
    best
}

/// Per-feature mean and standard deviation over observed entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub const STD_FLOOR: f64 = 1e-8;

impl Normalizer {
    pub fn fit(batch: &TimeSeriesBatch) -> Result<Self> {
        let d = batch.features();
        let mut sum = vec![0.0; d];
        let mut count = vec![0usize; d];
        for (i, (&v, &m)) in batch.values.data().iter().zip(batch.mask.data()).enumerate() {
            if m > 0.0 {
                sum[i % d] += v;
                count[i % d] += 1;
            }
        }
        if let Some(f) = count.iter().position(|&c| c == 0) {
            return Err(Error::Data(format!("feature {} has no observed values", batch.feature_names[f])));
        }
        let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, &c)| s / c as f64).collect();
        let mut var = vec![0.0; d];
        for (i, (&v, &m)) in batch.values.data().iter().zip(batch.mask.data()).enumerate() {
            if m > 0.0 {
                var[i % d] += (v - mean[i % d]).powi(2);
            }
        }
        let std = var
            .iter()
            .zip(&count)
            .map(|(v, &c)| (v / c as f64).sqrt().max(STD_FLOOR))
            .collect();
        Ok(Self { mean, std })
    }

    fn map(&self, values: &Tensor<f64>, f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor<f64>> {
        let d = self.mean.len();
        if values.shape().last() != Some(&d) {
            return Err(Error::Data(format!("normalizer for {d} features got {:?}", values.shape())));
        }
        let out = values
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| f(v, self.mean[i % d], self.std[i % d]))
            .collect();
        Ok(Tensor::from_vec(out, values.shape())?)
    }

    pub fn normalize_values(&self, values: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.map(values, |v, m, s| (v - m) / s)
    }

    pub fn denormalize_values(&self, values: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.map(values, |v, m, s| v * s + m)
    }

    /// Normalized copy; missing entries stay zero.
    pub fn normalize(&self, batch: &TimeSeriesBatch) -> Result<TimeSeriesBatch> {
        TimeSeriesBatch::new(
            self.normalize_values(&batch.values)?,
            batch.mask.clone(),
            batch.timestamps.clone(),
            batch.offsets.clone(),
            batch.feature_names.clone(),
        )
    }
}

/// Writes `(b, t, d)` for every set entry of `mask [B, T, D]`.
pub fn write_mask_csv(mask: &Tensor<f64>, writer: impl Write) -> Result<()> {
    let (t, d) = match *mask.shape() {
        [_, t, d] => (t, d),
        _ => return Err(Error::Data("mask must be [B, T, D]".into())),
    };
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["b", "t", "d"])?;
    for (i, &m) in mask.data().iter().enumerate() {
        if m > 0.0 {
            w.write_record(&[(i / (t * d)).to_string(), (i / d % t).to_string(), (i % d).to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads triples written by [`write_mask_csv`] into a mask of `shape`.
pub fn read_mask_csv(reader: impl Read, shape: &[usize]) -> Result<Tensor<f64>> {
    let (b, t, d) = match *shape {
        [b, t, d] => (b, t, d),
        _ => return Err(Error::Data("mask must be [B, T, D]".into())),
    };
    let mut out = vec![0.0; b * t * d];
    let mut rdr = csv::Reader::from_reader(reader);
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let idx: Vec<usize> = rec
            .iter()
            .map(|c| c.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Data(format!("mask row {}: {e}", r + 2)))?;
        match idx[..] {
            [i, j, k] if i < b && j < t && k < d => out[(i * t + j) * d + k] = 1.0,
            _ => return Err(Error::Data(format!("mask row {}: index outside {shape:?}", r + 2))),
        }
    }
    Ok(Tensor::from_vec(out, shape)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn longest_run_skips_taken_positions() {
        let taken = [true, false, false, true, false, false, false, true];
        let obs = [true; 8];
        assert_eq!(longest_free_run(&taken, &obs), Some((4, 3)));
        assert_eq!(longest_free_run(&[true, true], &[true, true]), None);
    }

    #[test]
    fn block_bounds_default_to_fractions_of_length() {
        let spec = MaskSpec::timewise(0.5, 0);
        assert_eq!(spec.block_bounds(96).unwrap(), (8, 16));
        let bad = MaskSpec {
            block_min: Some(5),
            block_max: Some(2),
            ..spec
        };
        assert!(bad.block_bounds(96).is_err());
    }
}
