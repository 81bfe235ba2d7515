//! File output helpers.

use std::io::Write;
use std::path::Path;

use crate::error::{CliError, Result};

/// Writes through a temporary file in the target directory and renames it
/// into place, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path)
        .map_err(|e| CliError::data(format!("cannot write {}: {}", path.display(), e.error)))?;
    Ok(())
}

/// Bytes of a CSV with columns `date, <key>, features...`: for every time
/// step one row per slab, each slab holding `[N, D]` values.
pub fn long_csv(
    timestamps: &[String],
    names: &[String],
    key: &str,
    slabs: &[(String, &[f64])],
) -> Result<Vec<u8>> {
    let d = names.len();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["date".to_string(), key.to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    for (t, stamp) in timestamps.iter().enumerate() {
        for (label, values) in slabs {
            let mut rec = vec![stamp.clone(), label.clone()];
            rec.extend(values[t * d..(t + 1) * d].iter().map(|v| format!("{v}")));
            w.write_record(&rec)?;
        }
    }
    w.into_inner().map_err(|e| CliError::data(e.to_string()))
}

/// Parsed [`long_csv`] contents: the key labels in first-seen order and one
/// `[N, D]` slab per label.
#[derive(Debug, Clone, PartialEq)]
pub struct LongTable {
    pub names: Vec<String>,
    pub labels: Vec<String>,
    pub timestamps: Vec<String>,
    pub slabs: Vec<Vec<f64>>,
}

pub fn read_long_csv(path: &Path) -> Result<LongTable> {
    let bad = |msg: String| CliError::data(format!("{}: {msg}", path.display()));
    let mut rdr = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let header = rdr.headers()?.clone();
    if header.len() < 3 || &header[0] != "date" {
        return Err(bad("expected columns date, key, features...".into()));
    }
    let names: Vec<String> = header.iter().skip(2).map(String::from).collect();
    let mut labels: Vec<String> = Vec::new();
    let mut timestamps: Vec<String> = Vec::new();
    let mut slabs: Vec<Vec<f64>> = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let (stamp, label) = (&rec[0], &rec[1]);
        let k = match labels.iter().position(|l| l == label) {
            Some(k) => k,
            None => {
                labels.push(label.to_string());
                slabs.push(Vec::new());
                labels.len() - 1
            }
        };
        if k == 0 {
            timestamps.push(stamp.to_string());
        }
        for c in rec.iter().skip(2) {
            let v: f64 = c.trim().parse().map_err(|e| bad(format!("row {}: {e}", r + 2)))?;
            slabs[k].push(v);
        }
    }
    let n = timestamps.len() * names.len();
    if labels.is_empty() || slabs.iter().any(|s| s.len() != n) {
        return Err(bad("every key needs one row per time step".into()));
    }
    Ok(LongTable {
        names,
        labels,
        timestamps,
        slabs,
    })
}
