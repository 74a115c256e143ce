//! Checkpoint container shared by model and predictor files: a u32-length
//! prefixed JSON header followed by a little-endian f64 payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub(crate) fn write_header_and_f64s(
    path: &Path,
    header: &serde_json::Value,
    data: &[f64],
) -> Result<()> {
    let json = serde_json::to_vec(header).map_err(|e| Error::Format(e.to_string()))?;
    let mut bytes = Vec::with_capacity(4 + json.len() + data.len() * 8);
    bytes.extend_from_slice(&(json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&json);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

pub(crate) fn read_header_and_f64s(path: &Path) -> Result<(serde_json::Value, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.len() < 4 {
        return Err(Error::Format("checkpoint too short".into()));
    }
    let json_len = u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
    if bytes.len() < 4 + json_len {
        return Err(Error::Format("checkpoint header truncated".into()));
    }
    let header: serde_json::Value = serde_json::from_slice(&bytes[4..4 + json_len])
        .map_err(|e| Error::Format(format!("bad checkpoint header: {e}")))?;
    let payload = &bytes[4 + json_len..];
    if payload.len() % 8 != 0 {
        return Err(Error::Format("checkpoint payload truncated".into()));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
        .collect();
    Ok((header, data))
}
