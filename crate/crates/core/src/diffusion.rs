//! Noise schedule, forward noising, the masked training objective and the
//! conditional ancestral sampler.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use spectra_tensor::{Element, Tensor};

use crate::denoiser::{Denoiser, DenoiserParams};
use crate::error::{Error, Result};
use crate::nn::ForwardCtx;

/// How `beta` moves between its endpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    /// Linear in `sqrt(beta)`.
    Quadratic,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: ScheduleKind,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            beta_start: 1e-4,
            beta_end: 0.5,
            kind: ScheduleKind::Quadratic,
        }
    }
}

/// Per-step coefficients, indexed by `s` in `1..=S`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

/// Quadratic schedule `beta_s = (sqrt(b0) + (s-1)/(S-1) (sqrt(b1) - sqrt(b0)))^2`.
pub fn build_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    NoiseSchedule::new(&ScheduleConfig {
        steps,
        beta_start,
        beta_end,
        kind: ScheduleKind::Quadratic,
    })
}

impl NoiseSchedule {
    pub fn new(cfg: &ScheduleConfig) -> Result<Self> {
        let (b0, b1) = (cfg.beta_start, cfg.beta_end);
        if cfg.steps == 0 || !(0.0 < b0 && b0 < b1 && b1 < 1.0) {
            return Err(Error::Config(format!(
                "schedule needs S >= 1 and 0 < beta_start < beta_end < 1, got S={} [{b0}, {b1}]",
                cfg.steps
            )));
        }
        let n = cfg.steps;
        let frac = |s: usize| if n == 1 { 0.0 } else { (s - 1) as f64 / (n - 1) as f64 };
        // Endpoints are pinned so rounding in the square root cannot move them.
        let beta: Vec<f64> = (1..=n)
            .map(|s| match cfg.kind {
                _ if s == 1 => b0,
                _ if s == n => b1,
                ScheduleKind::Quadratic => (b0.sqrt() + frac(s) * (b1.sqrt() - b0.sqrt())).powi(2),
                ScheduleKind::Linear => b0 + frac(s) * (b1 - b0),
            })
            .collect();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(n);
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let sigma = (0..n)
            .map(|i| {
                if i == 0 {
                    0.0
                } else {
                    ((1.0 - alpha_bar[i - 1]) / (1.0 - alpha_bar[i]) * beta[i]).sqrt()
                }
            })
            .collect();
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
            sigma,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn index(&self, s: usize) -> Result<usize> {
        if s == 0 || s > self.steps() {
            return Err(Error::Config(format!("diffusion step {s} outside [1, {}]", self.steps())));
        }
        Ok(s - 1)
    }

    pub fn beta(&self, s: usize) -> f64 {
        self.beta[s - 1]
    }

    pub fn alpha(&self, s: usize) -> f64 {
        self.alpha[s - 1]
    }

    pub fn alpha_bar(&self, s: usize) -> f64 {
        self.alpha_bar[s - 1]
    }

    pub fn sigma(&self, s: usize) -> f64 {
        self.sigma[s - 1]
    }
}

/// `x_s = sqrt(abar_s) x0 + sqrt(1 - abar_s) eps`.
pub fn forward_noise<E: Element>(x0: &Tensor<E>, s: usize, eps: &Tensor<E>, sched: &NoiseSchedule) -> Result<Tensor<E>> {
    let ab = sched.alpha_bar[sched.index(s)?];
    let a = x0.scale(E::from_f64_lossy(ab.sqrt()));
    Ok(a.add(&eps.scale(E::from_f64_lossy((1.0 - ab).sqrt())))?)
}

/// One ancestral step:
/// `x_{s-1} = (x_s - (1 - a_s)/sqrt(1 - abar_s) eps_hat) / sqrt(a_s) + sigma_s zeta`,
/// with no noise at `s = 1`.
pub fn reverse_step<E: Element>(
    x_s: &Tensor<E>,
    s: usize,
    eps_hat: &Tensor<E>,
    sched: &NoiseSchedule,
    zeta: &Tensor<E>,
) -> Result<Tensor<E>> {
    let i = sched.index(s)?;
    let (a, ab) = (sched.alpha[i], sched.alpha_bar[i]);
    let coef = (1.0 - a) / (1.0 - ab).sqrt();
    let mean = x_s
        .sub(&eps_hat.scale(E::from_f64_lossy(coef)))?
        .scale(E::from_f64_lossy(1.0 / a.sqrt()));
    if s == 1 {
        return Ok(mean);
    }
    Ok(mean.add(&zeta.scale(E::from_f64_lossy(sched.sigma[i])))?)
}

/// Standard-normal tensor drawn in `f64`.
pub fn gaussian<E: Element>(shape: &[usize], rng: &mut impl Rng) -> Result<Tensor<E>> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_f64(&data, shape)?)
}

/// Observed, conditional and target masks of one training batch.
#[derive(Debug, Clone)]
pub struct TrainingMasks<E: Element> {
    pub observed: Tensor<E>,
    pub cond: Tensor<E>,
    pub target: Tensor<E>,
}

/// Draws a missing ratio `r ~ U(min, max)` per sample and moves each
/// observed entry to the target set with probability `r`.
pub fn sample_training_masks<E: Element>(
    observed: &Tensor<E>,
    ratio: (f64, f64),
    rng: &mut impl Rng,
) -> Result<TrainingMasks<E>> {
    if !(0.0 <= ratio.0 && ratio.0 <= ratio.1 && ratio.1 <= 1.0) {
        return Err(Error::Config(format!("mask ratio range [{}, {}] is invalid", ratio.0, ratio.1)));
    }
    let b = observed.shape().first().copied().unwrap_or(0);
    let per = if b == 0 { 0 } else { observed.numel() / b };
    let mut cond = Vec::with_capacity(observed.numel());
    let mut target = Vec::with_capacity(observed.numel());
    for sample in observed.data().chunks(per.max(1)) {
        let r = rng.gen_range(ratio.0..=ratio.1);
        for &m in sample {
            let hide = m > E::zero() && rng.gen::<f64>() < r;
            let keep = m > E::zero() && !hide;
            cond.push(if keep { E::one() } else { E::zero() });
            target.push(if hide { E::one() } else { E::zero() });
        }
    }
    Ok(TrainingMasks {
        observed: observed.clone(),
        cond: Tensor::from_vec(cond, observed.shape())?,
        target: Tensor::from_vec(target, observed.shape())?,
    })
}

/// `sum(((eps - eps_hat) * target)^2) / sum(target)`, pooled over the batch
/// so samples without target entries carry no weight. An empty target set
/// gives a zero loss.
pub fn masked_loss<E: Element>(eps: &Tensor<E>, eps_hat: &Tensor<E>, target: &Tensor<E>) -> Result<Tensor<E>> {
    let count = target.data().iter().fold(0.0, |acc, v| acc + v.to_f64_lossy());
    let diff = eps.sub(eps_hat)?.mul(target)?;
    if count == 0.0 {
        return Ok(diff.sum().scale(E::zero()));
    }
    Ok(diff.square().sum().scale(E::from_f64_lossy(1.0 / count)))
}

/// Stacks `[m_co * x, (1 - m_co) * x_t]` into the `[B, 2, T, D]` input.
pub fn assemble_input<E: Element>(cond_values: &Tensor<E>, m_co: &Tensor<E>, x_t: &Tensor<E>) -> Result<Tensor<E>> {
    let shape = cond_values.shape();
    let mut split = vec![shape[0], 1];
    split.extend(&shape[1..]);
    let noisy = x_t.mul(&m_co.scale(E::from_f64_lossy(-1.0)).add_scalar(E::one()))?;
    Ok(Tensor::concat(&[cond_values.reshape(&split)?, noisy.reshape(&split)?], 1)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskRatio {
    pub min: f64,
    pub max: f64,
}

impl Default for MaskRatio {
    fn default() -> Self {
        Self { min: 0.1, max: 0.9 }
    }
}

/// Result of one training step.
pub struct StepLoss<E: Element> {
    pub loss: Tensor<E>,
    pub step: usize,
    pub targets: usize,
}

/// Samples masks, one diffusion step for the batch and the noise; returns
/// the masked loss with its graph attached.
#[allow(clippy::too_many_arguments)]
pub fn training_step<E: Element>(
    model: &Denoiser<E>,
    params: &DenoiserParams<E>,
    values: &Tensor<E>,
    observed: &Tensor<E>,
    sched: &NoiseSchedule,
    ratio: MaskRatio,
    rng: &mut ChaCha8Rng,
    ctx: &mut ForwardCtx,
) -> Result<StepLoss<E>> {
    if observed.data().iter().all(|&m| m == E::zero()) {
        return Err(Error::Data("training batch has no observed entries".into()));
    }
    let masks = sample_training_masks(observed, (ratio.min, ratio.max), rng)?;
    let s = rng.gen_range(1..=sched.steps());
    let eps = gaussian::<E>(values.shape(), rng)?;
    loss_at_step(model, params, values, &masks, s, &eps, sched, ctx)
}

/// Loss for given masks, step and noise.
#[allow(clippy::too_many_arguments)]
pub fn loss_at_step<E: Element>(
    model: &Denoiser<E>,
    params: &DenoiserParams<E>,
    values: &Tensor<E>,
    masks: &TrainingMasks<E>,
    s: usize,
    eps: &Tensor<E>,
    sched: &NoiseSchedule,
    ctx: &mut ForwardCtx,
) -> Result<StepLoss<E>> {
    let x_s = forward_noise(values, s, eps, sched)?;
    let cond_values = values.mul(&masks.cond)?;
    let x_in = assemble_input(&cond_values, &masks.cond, &x_s)?;
    let cond = model.condition(&cond_values, &masks.cond, params)?;
    let eps_hat = model.predict_eps(&x_in, s, &cond, params, ctx)?;
    let loss = masked_loss(eps, &eps_hat, &masks.target)?;
    let targets = masks.target.data().iter().filter(|&&v| v > E::zero()).count();
    Ok(StepLoss { loss, step: s, targets })
}

/// Denoising loss averaged over every diffusion step for one batch, with
/// masks and noise drawn once from `rng`. Evaluation mode, no graph.
pub fn validation_loss<E: Element>(
    model: &Denoiser<E>,
    params: &DenoiserParams<E>,
    values: &Tensor<E>,
    observed: &Tensor<E>,
    sched: &NoiseSchedule,
    ratio: MaskRatio,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let frozen = params.frozen();
    let masks = sample_training_masks(observed, (ratio.min, ratio.max), rng)?;
    let eps = gaussian::<E>(values.shape(), rng)?;
    let mut total = 0.0;
    for s in 1..=sched.steps() {
        let out = loss_at_step(model, &frozen, values, &masks, s, &eps, sched, &mut ForwardCtx::eval())?;
        total += out.loss.item()?.to_f64_lossy();
    }
    Ok(total / sched.steps() as f64)
}

/// `K` samples with their mean and per-entry quantiles.
#[derive(Debug, Clone)]
pub struct ImputationResult<E: Element> {
    /// `[K, B, T, D]`
    pub samples: Tensor<E>,
    /// `[B, T, D]`
    pub mean: Tensor<E>,
    /// `(level, [B, T, D])` pairs in requested order.
    pub quantiles: Vec<(f64, Tensor<E>)>,
}

/// Sampler options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub samples: usize,
    pub quantiles: Vec<f64>,
    /// Upper bound on series pushed through the network at once.
    pub max_batch: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            samples: 16,
            quantiles: vec![0.05, 0.5, 0.95],
            max_batch: 64,
        }
    }
}

/// Runs `K` independent reverse chains conditioned on `m_co * x`.
///
/// Chain `k` draws all its noise from its own generator (stream `k` of
/// `seed`), so results do not depend on how chains are grouped. Entries
/// with `m_co = 1` are copied from `x` into every sample.
#[allow(clippy::too_many_arguments)]
pub fn impute<E: Element>(
    model: &Denoiser<E>,
    params: &DenoiserParams<E>,
    x: &Tensor<E>,
    m_co: &Tensor<E>,
    sched: &NoiseSchedule,
    cfg: &SamplingConfig,
    seed: u64,
) -> Result<ImputationResult<E>> {
    let k = cfg.samples;
    if k == 0 {
        return Err(Error::Config("imputation needs at least one sample".into()));
    }
    if x.shape() != m_co.shape() || x.rank() != 3 {
        return Err(Error::Config(format!(
            "values {:?} and mask {:?} must both be [B, T, D]",
            x.shape(),
            m_co.shape()
        )));
    }
    if let Some(q) = cfg.quantiles.iter().find(|q| !(0.0..=1.0).contains(*q)) {
        return Err(Error::Config(format!("quantile level {q} outside [0, 1]")));
    }
    let frozen = params.frozen();
    let b = x.dim(0);
    let shape = x.shape().to_vec();
    let cond_values = x.mul(m_co)?;
    let group = (cfg.max_batch / b.max(1)).max(1);
    let mut samples: Vec<E> = Vec::with_capacity(k * x.numel());
    let mut start = 0;
    while start < k {
        let n = group.min(k - start);
        let tiled = |t: &Tensor<E>| -> Result<Tensor<E>> {
            let parts: Vec<Tensor<E>> = (0..n).map(|_| t.clone()).collect();
            Ok(Tensor::concat(&parts, 0)?)
        };
        let cv = tiled(&cond_values)?;
        let mc = tiled(m_co)?;
        let cond = model.condition(&cv, &mc, &frozen)?;
        let mut rngs: Vec<ChaCha8Rng> = (start..start + n)
            .map(|chain| {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                r.set_stream(chain as u64);
                r
            })
            .collect();
        let draw = |rngs: &mut [ChaCha8Rng]| -> Result<Tensor<E>> {
            let mut data = Vec::with_capacity(n * x.numel());
            for r in rngs.iter_mut() {
                data.extend(gaussian::<E>(&shape, r)?.to_vec());
            }
            let mut s = shape.clone();
            s[0] *= n;
            Ok(Tensor::from_vec(data, &s)?)
        };
        let mut x_t = draw(&mut rngs)?;
        for s in (1..=sched.steps()).rev() {
            let x_in = assemble_input(&cv, &mc, &x_t)?;
            let eps_hat = model.predict_eps(&x_in, s, &cond, &frozen, &mut ForwardCtx::eval())?;
            let zeta = if s > 1 { draw(&mut rngs)? } else { Tensor::zeros(x_t.shape()) };
            x_t = reverse_step(&x_t, s, &eps_hat, sched, &zeta)?;
        }
        x_t.check_finite("imputation sample")?;
        for chunk in x_t.data().chunks(x.numel()) {
            for (i, &v) in chunk.iter().enumerate() {
                samples.push(if m_co.data()[i] > E::zero() { x.data()[i] } else { v });
            }
        }
        start += n;
    }
    let mut full = vec![k];
    full.extend(&shape);
    let samples = Tensor::from_vec(samples, &full)?;
    let (mean, quantiles) = summarize(&samples, &cfg.quantiles)?;
    // Averaging identical values can round; observed entries stay exact.
    let mean = Tensor::from_vec(
        mean.data()
            .iter()
            .zip(x.data().iter().zip(m_co.data()))
            .map(|(&v, (&o, &m))| if m > E::zero() { o } else { v })
            .collect(),
        mean.shape(),
    )?;
    Ok(ImputationResult {
        samples,
        mean,
        quantiles,
    })
}

/// Mean and linearly interpolated quantiles over the leading sample axis.
pub fn summarize<E: Element>(samples: &Tensor<E>, levels: &[f64]) -> Result<(Tensor<E>, Vec<(f64, Tensor<E>)>)> {
    let k = samples.dim(0);
    let shape = &samples.shape()[1..];
    let n = samples.numel() / k.max(1);
    let data = samples.data();
    let mut mean = vec![E::zero(); n];
    let mut quant = vec![Vec::with_capacity(n); levels.len()];
    let mut column = vec![0.0; k];
    for i in 0..n {
        for (j, c) in column.iter_mut().enumerate() {
            *c = data[j * n + i].to_f64_lossy();
        }
        mean[i] = E::from_f64_lossy(column.iter().sum::<f64>() / k as f64);
        column.sort_by(f64::total_cmp);
        for (q, out) in levels.iter().zip(quant.iter_mut()) {
            let pos = q * (k - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            let v = column[lo] + (column[hi] - column[lo]) * (pos - lo as f64);
            out.push(E::from_f64_lossy(v));
        }
    }
    let quantiles = levels
        .iter()
        .zip(quant)
        .map(|(&q, v)| Ok((q, Tensor::from_vec(v, shape)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok((Tensor::from_vec(mean, shape)?, quantiles))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invalid_ranges_are_rejected() {
        assert!(build_schedule(0, 1e-4, 0.5).is_err());
        assert!(build_schedule(10, 0.5, 1e-4).is_err());
        assert!(build_schedule(10, 1e-4, 1.0).is_err());
        let one = build_schedule(1, 1e-4, 0.5).unwrap();
        assert_eq!(one.beta(1), 1e-4);
        assert_eq!(one.sigma(1), 0.0);
    }

    #[test]
    fn quantiles_interpolate() {
        let s = Tensor::from_vec(vec![3.0, 1.0, 2.0, 4.0], &[4, 1]).unwrap();
        let (mean, q) = summarize(&s, &[0.0, 0.5, 1.0]).unwrap();
        assert_eq!(mean.to_vec(), vec![2.5]);
        assert_eq!(q[0].1.to_vec(), vec![1.0]);
        assert_eq!(q[1].1.to_vec(), vec![2.5]);
        assert_eq!(q[2].1.to_vec(), vec![4.0]);
    }
}
