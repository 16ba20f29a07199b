//! On-disk layout shared by stream, checkpoint, and adapter-state files: a
//! single-line UTF-8 JSON header carrying a `format` tag, a blank line, then a
//! little-endian binary payload.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};

const SEPARATOR: &[u8] = b"\n\n";

pub(crate) fn write<H: Serialize>(path: &Path, header: &H, payload: &[u8]) -> Result<()> {
    let json = serde_json::to_string(header).map_err(|e| Error::CorruptHeader(e.to_string()))?;
    let mut bytes = Vec::with_capacity(json.len() + SEPARATOR.len() + payload.len());
    bytes.extend_from_slice(json.as_bytes());
    bytes.extend_from_slice(SEPARATOR);
    bytes.extend_from_slice(payload);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a framed file, checks its format tag, and decodes the header.
pub(crate) fn read<H: DeserializeOwned>(path: &Path, format: &'static str) -> Result<(H, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let split = bytes
        .windows(SEPARATOR.len())
        .position(|w| w == SEPARATOR)
        .ok_or_else(|| Error::CorruptHeader("missing blank line after header".into()))?;
    let text = std::str::from_utf8(&bytes[..split])
        .map_err(|e| Error::CorruptHeader(format!("header is not UTF-8: {e}")))?;
    let value: Value =
        serde_json::from_str(text).map_err(|e| Error::CorruptHeader(e.to_string()))?;
    let found = value
        .get("format")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::CorruptHeader("missing format field".into()))?;
    if found != format {
        return Err(Error::UnsupportedVersion {
            found: found.to_string(),
            expected: format,
        });
    }
    let header = serde_json::from_value(value).map_err(|e| Error::CorruptHeader(e.to_string()))?;
    Ok((header, bytes[split + SEPARATOR.len()..].to_vec()))
}

/// Reads only the JSON header of any framed file, without format checks.
pub fn read_header(path: &Path) -> Result<Value> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let split = bytes
        .windows(SEPARATOR.len())
        .position(|w| w == SEPARATOR)
        .ok_or_else(|| Error::CorruptHeader("missing blank line after header".into()))?;
    serde_json::from_slice(&bytes[..split]).map_err(|e| Error::CorruptHeader(e.to_string()))
}

pub(crate) fn encode_f32(values: &[f64]) -> Vec<u8> {
    values
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect()
}

pub(crate) fn encode_f64(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub(crate) fn decode_f32(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")) as f64)
        .collect()
}

pub(crate) fn decode_f64(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect()
}
