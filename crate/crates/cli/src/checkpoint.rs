//! Two-file checkpoints: a JSON manifest and a blob of little-endian `f32`
//! parameter values that the manifest's offsets partition exactly.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use spectra_core::data::Normalizer;
use spectra_core::denoiser::{Denoiser, DenoiserParams};
use spectra_tensor::Tensor;

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::io::write_atomic;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub config: RunConfig,
    pub normalizer: Normalizer,
    pub best_epoch: usize,
    /// Blob file name, relative to the manifest.
    pub blob: String,
    pub blob_bytes: usize,
    pub params: Vec<ParamRecord>,
}

pub struct Checkpoint {
    pub manifest: Manifest,
    pub model: Denoiser<f32>,
    pub params: DenoiserParams<f32>,
}

fn bad(path: &Path, msg: impl std::fmt::Display) -> CliError {
    CliError::data(format!("checkpoint {}: {msg}", path.display()))
}

/// `model.bin` next to `model.json`.
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

pub fn encode(params: &DenoiserParams<f32>) -> (Vec<ParamRecord>, Vec<u8>) {
    let mut records = Vec::new();
    let mut blob = Vec::new();
    for (name, t) in params.iter() {
        records.push(ParamRecord {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            offset: blob.len(),
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    (records, blob)
}

pub fn save(
    path: &Path,
    config: &RunConfig,
    normalizer: &Normalizer,
    best_epoch: usize,
    params: &DenoiserParams<f32>,
) -> Result<Manifest> {
    let (records, blob) = encode(params);
    let blob_file = blob_path(path);
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: config.clone(),
        normalizer: normalizer.clone(),
        best_epoch,
        blob: blob_file
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| CliError::config(format!("bad checkpoint path {}", path.display())))?
            .to_string(),
        blob_bytes: blob.len(),
        params: records,
    };
    write_atomic(&blob_file, &blob)?;
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    write_atomic(path, json.as_bytes())?;
    Ok(manifest)
}

/// Checks that the records tile `[0, blob_bytes)` in order without gaps.
pub fn check_partition(records: &[ParamRecord], blob_bytes: usize) -> std::result::Result<(), String> {
    let mut next = 0;
    for r in records {
        if r.dtype != "f32" {
            return Err(format!("{}: unsupported dtype {:?}", r.name, r.dtype));
        }
        if r.offset != next {
            return Err(format!("{}: offset {} where {next} was expected", r.name, r.offset));
        }
        next += 4 * r.shape.iter().product::<usize>();
    }
    if next != blob_bytes {
        return Err(format!("records cover {next} bytes of a {blob_bytes}-byte blob"));
    }
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| bad(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| bad(path, e))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(bad(path, format!("format version {} is not {FORMAT_VERSION}", manifest.format_version)));
    }
    manifest.config.validate()?;
    let blob_file = path.with_file_name(&manifest.blob);
    let blob = std::fs::read(&blob_file).map_err(|e| bad(&blob_file, e))?;
    if blob.len() != manifest.blob_bytes {
        return Err(bad(path, format!("blob has {} bytes, manifest says {}", blob.len(), manifest.blob_bytes)));
    }
    check_partition(&manifest.params, blob.len()).map_err(|m| bad(path, m))?;
    let model = Denoiser::<f32>::new(manifest.config.model.clone())?;
    let mut params = model.init_params(0)?;
    if params.len() != manifest.params.len() {
        return Err(bad(path, format!("{} parameters stored, model has {}", manifest.params.len(), params.len())));
    }
    let mut seen = std::collections::HashSet::new();
    for r in &manifest.params {
        if !seen.insert(r.name.as_str()) {
            return Err(bad(path, format!("parameter {} stored twice", r.name)));
        }
        let n: usize = r.shape.iter().product();
        let values: Vec<f32> = blob[r.offset..r.offset + 4 * n]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let t = Tensor::from_vec(values, &r.shape).map_err(|e| bad(path, e))?;
        params.set(&r.name, t).map_err(|e| bad(path, e))?;
    }
    Ok(Checkpoint {
        manifest,
        model,
        params,
    })
}
