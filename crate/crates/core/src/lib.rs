//! Conditional diffusion imputation for multivariate time series.
//!
//! The denoiser mixes a frequency branch (trend/residual decomposition and a
//! Fourier bias projection over DFT, STFT or synchrosqueezed STFT
//! coefficients) with temporal attention or gated dilated convolutions and
//! attention across features.

pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod evaluate;
pub mod error;
pub mod fbp;
pub mod nn;
pub mod spectral;
pub mod train;

pub use error::{Error, Result};
