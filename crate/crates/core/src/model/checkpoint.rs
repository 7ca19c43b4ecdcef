//! Checkpoint file: one line of JSON `{arch, seed, step}`, a newline, then the
//! parameters as little-endian `f64`.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{MlpArch, ParamVector, ScoreNet};
use crate::error::{Error, Result};
use crate::io::{atomic_write, f64s_to_le_bytes, le_bytes_to_f64s};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub arch: MlpArch,
    pub seed: u64,
    pub step: u64,
}

pub fn save_checkpoint(path: &Path, net: &ScoreNet, seed: u64, step: u64) -> Result<()> {
    let header = CheckpointHeader {
        arch: net.arch().clone(),
        seed,
        step,
    };
    let mut bytes = serde_json::to_vec(&header)?;
    bytes.push(b'\n');
    bytes.extend(f64s_to_le_bytes(net.params().as_slice()));
    atomic_write(path, &bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<(ScoreNet, CheckpointHeader)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Schema(format!("{}: missing checkpoint header line", path.display())))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..split])
        .map_err(|e| Error::Schema(format!("{}: bad checkpoint header: {e}", path.display())))?;
    header.arch.validate()?;
    let values = le_bytes_to_f64s(&bytes[split + 1..])?;
    let expected = header.arch.n_params();
    if values.len() != expected {
        return Err(Error::Schema(format!(
            "{}: body holds {} parameters, architecture needs {expected}",
            path.display(),
            values.len()
        )));
    }
    let params = ParamVector::new(values, Arc::new(header.arch.layout()))?;
    let net = ScoreNet::new(header.arch.clone(), params)?;
    Ok((net, header))
}
