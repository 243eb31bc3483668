//! Little-endian tensor files and JSON helpers.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub(crate) fn write_f64s(buf: &mut Vec<u8>, values: &[f64]) {
    buf.reserve(values.len() * 8);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Reads `count` values and advances `bytes`. Caller checks the length.
pub(crate) fn read_f64s(bytes: &mut &[u8], count: usize) -> Vec<f64> {
    let (head, tail) = bytes.split_at(count * 8);
    *bytes = tail;
    head.chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

/// Writes a flat row-major `f64` tensor file.
pub fn write_tensor(path: impl AsRef<Path>, values: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_f64s(&mut buf, values);
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads a flat tensor file holding exactly `expected` values.
pub fn read_tensor(path: impl AsRef<Path>, expected: usize) -> Result<Vec<f64>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected * 8 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("expected {expected} values, found {} bytes", bytes.len()),
        });
    }
    Ok(read_f64s(&mut bytes.as_slice(), expected))
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub fn create_dir(path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}
