//! Optimizer and training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use spectra_tensor::{Element, Gradients, Tensor};

use crate::data::TimeSeriesBatch;
use crate::denoiser::{Denoiser, DenoiserParams};
use crate::diffusion::{training_step, validation_loss, MaskRatio, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::ForwardCtx;

/// Adam with bias correction. Moments are kept in `f64`.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update with learning rate `lr`. Parameters that received
    /// no gradient are treated as having a zero gradient.
    pub fn update<E: Element>(&mut self, params: &mut DenoiserParams<E>, grads: &Gradients<E>, lr: f64) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let mut updated = Vec::with_capacity(params.len());
        for (i, (_, p)) in params.iter().enumerate() {
            let g = grads.get(p).map(Tensor::to_f64_vec);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let mut next = p.to_f64_vec();
            for j in 0..next.len() {
                let gj = g.as_ref().map_or(0.0, |g| g[j]);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                next[j] -= lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
            }
            updated.push(Tensor::from_f64(&next, p.shape())?);
        }
        let names: Vec<String> = params.names().map(String::from).collect();
        for (name, value) in names.iter().zip(updated) {
            params.set(name, value)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fractions of `epochs` after which the rate is multiplied by `lr_decay`.
    pub lr_milestones: Vec<f64>,
    pub lr_decay: f64,
    pub seed: u64,
    /// Validate every this many epochs (and after the last); 0 disables it.
    pub validate_every: usize,
    pub mask_ratio: MaskRatio,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 16,
            learning_rate: 1e-3,
            lr_milestones: vec![0.75, 0.9],
            lr_decay: 0.1,
            seed: 0,
            validate_every: 1,
            mask_ratio: MaskRatio::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} is invalid", self.learning_rate)));
        }
        if self.lr_milestones.iter().any(|m| !(0.0..=1.0).contains(m)) || !(self.lr_decay > 0.0) {
            return Err(Error::Config("milestones must lie in [0, 1] and decay must be positive".into()));
        }
        let r = self.mask_ratio;
        if !(0.0 <= r.min && r.min <= r.max && r.max <= 1.0) {
            return Err(Error::Config(format!("mask ratio range [{}, {}] is invalid", r.min, r.max)));
        }
        Ok(())
    }

    /// Learning rate used during zero-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self
            .lr_milestones
            .iter()
            .filter(|&&m| epoch >= (m * self.epochs as f64).floor() as usize)
            .count();
        self.learning_rate * self.lr_decay.powi(passed as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<E: Element> {
    /// Parameters with the lowest validation loss, or the final ones when
    /// validation is off.
    pub params: DenoiserParams<E>,
    pub best_epoch: usize,
    pub best_val_loss: Option<f64>,
    pub log: Vec<EpochLog>,
}

/// All-steps validation loss over `data` in chunks of `batch_size`, with a
/// fixed noise seed so values are comparable between epochs.
pub fn evaluate_loss<E: Element>(
    model: &Denoiser<E>,
    params: &DenoiserParams<E>,
    data: &TimeSeriesBatch,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_7a1d);
    let mut total = 0.0;
    let mut weight = 0usize;
    let mut start = 0;
    while start < data.batch() {
        let n = cfg.batch_size.min(data.batch() - start);
        let chunk = data.slice(start, n)?;
        if chunk.mask.data().iter().any(|&m| m > 0.0) {
            let loss = validation_loss(
                model,
                params,
                &chunk.values.cast::<E>(),
                &chunk.mask.cast::<E>(),
                sched,
                cfg.mask_ratio,
                &mut rng,
            )?;
            total += loss * n as f64;
            weight += n;
        }
        start += n;
    }
    if weight == 0 {
        return Err(Error::Data("validation set has no observed entries".into()));
    }
    Ok(total / weight as f64)
}

/// Trains from `init` on `train`; `on_epoch` sees each log entry as it is
/// produced. A non-finite loss aborts with [`Error::Numeric`].
pub fn fit<E: Element>(
    model: &Denoiser<E>,
    init: DenoiserParams<E>,
    train: &TimeSeriesBatch,
    val: Option<&TimeSeriesBatch>,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome<E>> {
    cfg.validate()?;
    if train.batch() == 0 {
        return Err(Error::Data("training set is empty".into()));
    }
    let mut params = init;
    let mut adam = Adam::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut ctx = ForwardCtx::train(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..train.batch()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, DenoiserParams<E>)> = None;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for picks in order.chunks(cfg.batch_size) {
            let batch = train.select(picks)?;
            if batch.mask.data().iter().all(|&m| m == 0.0) {
                continue;
            }
            let values = batch.values.cast::<E>();
            let observed = batch.mask.cast::<E>();
            let out = training_step(model, &params, &values, &observed, sched, cfg.mask_ratio, &mut rng, &mut ctx)?;
            let loss = out.loss.item()?.to_f64_lossy();
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss became {loss} at epoch {} (diffusion step {}, {} targets)",
                    epoch + 1,
                    out.step,
                    out.targets
                )));
            }
            let grads = out.loss.backward()?;
            adam.update(&mut params, &grads, lr)?;
            if !params.all_finite() {
                return Err(Error::Numeric(format!("parameters became non-finite at epoch {}", epoch + 1)));
            }
            sum += loss;
            batches += 1;
        }
        let due = cfg.validate_every > 0 && ((epoch + 1) % cfg.validate_every == 0 || epoch + 1 == cfg.epochs);
        let val_loss = match val {
            Some(v) if due => Some(evaluate_loss(model, &params, v, sched, cfg)?),
            _ => None,
        };
        if let Some(vl) = val_loss {
            if best.as_ref().map_or(true, |(b, _, _)| vl < *b) {
                best = Some((vl, epoch + 1, params.clone()));
            }
        }
        let entry = EpochLog {
            epoch: epoch + 1,
            lr,
            train_loss: if batches > 0 { sum / batches as f64 } else { 0.0 },
            val_loss,
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(match best {
        Some((v, e, p)) => TrainOutcome {
            params: p,
            best_epoch: e,
            best_val_loss: Some(v),
            log,
        },
        None => TrainOutcome {
            params,
            best_epoch: cfg.epochs,
            best_val_loss: None,
            log,
        },
    })
}
