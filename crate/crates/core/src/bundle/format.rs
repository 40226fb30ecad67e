//! ITMB dense matrix files.
//!
//! Layout: magic `ITMB`, `u32` LE row count, `u32` LE dim, then `count * dim`
//! little-endian `f32` values in row-major order. Nothing follows the payload.

use std::fs;
use std::path::Path;

use super::BundleError;

pub const MAGIC: &[u8; 4] = b"ITMB";
pub const HEADER_LEN: usize = 12;

/// A decoded ITMB payload, widened to `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawMatrix {
    pub count: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

pub fn encode(count: usize, dim: usize, data: &[f64]) -> Vec<u8> {
    assert_eq!(count * dim, data.len(), "payload length must equal count * dim");
    let mut out = Vec::with_capacity(HEADER_LEN + 4 + data.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(count as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for v in data {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8], file: &str) -> Result<RawMatrix, BundleError> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(BundleError::MagicMismatch { file: file.to_string() });
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let payload = &bytes[HEADER_LEN..];
    let expected = count
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| BundleError::Truncated { file: file.to_string() })?;
    if payload.len() != expected {
        return Err(BundleError::Truncated { file: file.to_string() });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(RawMatrix { count, dim, data })
}

pub fn read(path: &Path) -> Result<RawMatrix, BundleError> {
    let file = path
        .file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_default();
    if !path.is_file() {
        return Err(BundleError::MissingFile(file));
    }
    let bytes = fs::read(path)?;
    decode(&bytes, &file)
}

pub fn write(path: &Path, count: usize, dim: usize, data: &[f64]) -> Result<(), BundleError> {
    fs::write(path, encode(count, dim, data))?;
    Ok(())
}
