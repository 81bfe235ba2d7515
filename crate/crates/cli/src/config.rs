//! Run configuration: one JSON document, overridable from the command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use spectra_core::data::{MaskSpec, SynthSpec};
use spectra_core::denoiser::DenoiserConfig;
use spectra_core::diffusion::{SamplingConfig, ScheduleConfig};
use spectra_core::train::TrainConfig;

use crate::error::{CliError, Result};

/// Environment variable consulted when neither the flags nor the config
/// file set a seed.
pub const SEED_ENV: &str = "SPECTRA_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Csv { path: PathBuf },
    Synth(SynthSpec),
    /// Shorthand for [`SynthSpec::random`].
    SynthRandom {
        features: usize,
        length: usize,
        period: usize,
        #[serde(default)]
        seed: u64,
    },
}

/// Chronological train/validation/test split of the source rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Split {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for Split {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub split: Split,
    /// Window stride on the training rows; the window length when unset.
    /// Validation and test windows never overlap.
    pub train_stride: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::SynthRandom {
                features: 4,
                length: 4800,
                period: 24,
                seed: 0,
            },
            split: Split::default(),
            train_stride: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    /// Missingness applied to the test split for evaluation.
    pub mask: MaskSpec,
    pub model: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub sampling: SamplingConfig,
    /// Drives parameter initialization, training, masks and sampling. When
    /// absent, `SPECTRA_SEED` is used, then 0.
    pub seed: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            mask: MaskSpec::pointwise(0.1, 0),
            model: DenoiserConfig {
                features: 4,
                ..DenoiserConfig::default()
            },
            schedule: ScheduleConfig::default(),
            train: TrainConfig::default(),
            sampling: SamplingConfig::default(),
            seed: None,
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub samples: Option<usize>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CliError::config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies flags, then the seed fallback chain, then validates.
    pub fn resolve(mut self, over: &Overrides, env_seed: Option<&str>) -> Result<Self> {
        if let Some(v) = over.epochs {
            self.train.epochs = v;
        }
        if let Some(v) = over.batch_size {
            self.train.batch_size = v;
        }
        if let Some(v) = over.learning_rate {
            self.train.learning_rate = v;
        }
        if let Some(v) = over.samples {
            self.sampling.samples = v;
        }
        let seed = match (over.seed, self.seed, env_seed) {
            (Some(s), _, _) | (None, Some(s), _) => s,
            (None, None, Some(text)) => text
                .trim()
                .parse()
                .map_err(|_| CliError::config(format!("{SEED_ENV}={text:?} is not an unsigned integer")))?,
            (None, None, None) => 0,
        };
        self.seed = Some(seed);
        self.train.seed = seed;
        self.mask.seed = seed;
        self.validate()?;
        Ok(self)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let s = &self.schedule;
        if s.steps != self.model.diffusion_steps {
            return Err(CliError::config(format!(
                "schedule has {} steps but the model embeds {}",
                s.steps, self.model.diffusion_steps
            )));
        }
        spectra_core::diffusion::NoiseSchedule::new(s)?;
        let split = self.data.split;
        let parts = [split.train, split.val, split.test];
        if parts.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || split.train <= 0.0 || split.test <= 0.0 {
            return Err(CliError::config("split fractions must be non-negative with train and test positive"));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(CliError::config("split fractions must sum to 1"));
        }
        if self.data.train_stride == Some(0) {
            return Err(CliError::config("train_stride must be positive"));
        }
        if !(self.mask.rate > 0.0 && self.mask.rate < 1.0) {
            return Err(CliError::config(format!("mask rate {} outside (0, 1)", self.mask.rate)));
        }
        if self.sampling.samples == 0 || self.sampling.max_batch == 0 {
            return Err(CliError::config("sampling needs at least one sample and a positive batch"));
        }
        if let Some(q) = self.sampling.quantiles.iter().find(|q| !(0.0..=1.0).contains(*q)) {
            return Err(CliError::config(format!("quantile level {q} outside [0, 1]")));
        }
        if let DataSource::SynthRandom { features, length, period, .. } = self.data.source {
            if features == 0 || length == 0 || period == 0 {
                return Err(CliError::config("synthetic data needs features, length and period"));
            }
            if features != self.model.features {
                return Err(CliError::config(format!(
                    "data has {features} features but the model expects {}",
                    self.model.features
                )));
            }
        }
        if let DataSource::Synth(spec) = &self.data.source {
            if spec.features.len() != self.model.features {
                return Err(CliError::config(format!(
                    "data has {} features but the model expects {}",
                    spec.features.len(),
                    self.model.features
                )));
            }
        }
        Ok(())
    }
}
