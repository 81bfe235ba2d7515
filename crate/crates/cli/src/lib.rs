//! Training, imputation, evaluation, ablation and plotting behind the
//! `spectra` command.

pub mod ablate;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod experiment;
pub mod io;
pub mod plot;

pub use error::{CliError, ErrorKind, Result};
