//! File formats shared by the runner and the CLI.
//!
//! Point clouds are a raw little-endian `f64` body in row-major order plus a
//! JSON sidecar `{m, d, seed}` next to it (`<file>.json`). All writes go to a
//! temporary file in the destination directory and are renamed into place.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Write `bytes` to `path` through a temporary sibling and a rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let mut file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    file.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    file.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(file);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
}

pub fn f64s_to_le_bytes(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn le_bytes_to_f64s(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return Err(Error::Schema(format!("binary body of {} bytes is not a whole number of f64", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Sidecar of a binary point cloud.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CloudMeta {
    pub m: usize,
    pub d: usize,
    pub seed: Option<u64>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".json");
    path.with_file_name(name)
}

/// Write an `m x d` cloud and its sidecar.
pub fn write_cloud(path: &Path, points: &Array2<f64>, seed: Option<u64>) -> Result<()> {
    let body: Vec<f64> = points.iter().copied().collect();
    atomic_write(path, &f64s_to_le_bytes(&body))?;
    let meta = CloudMeta {
        m: points.nrows(),
        d: points.ncols(),
        seed,
    };
    write_json(&sidecar_path(path), &meta)
}

pub fn read_cloud(path: &Path) -> Result<(Array2<f64>, CloudMeta)> {
    let meta: CloudMeta = read_json(&sidecar_path(path))?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let values = le_bytes_to_f64s(&bytes)?;
    if values.len() != meta.m * meta.d {
        return Err(Error::Schema(format!(
            "{}: sidecar declares {} x {} but body holds {} values",
            path.display(),
            meta.m,
            meta.d,
            values.len()
        )));
    }
    let points = Array2::from_shape_vec((meta.m, meta.d), values).expect("checked length");
    Ok((points, meta))
}
