//! File helpers shared by the stage outputs.

use std::fs;
use std::path::Path;

use num_complex::Complex64;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// Pretty JSON with a trailing newline.
pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Little-endian `f64` pairs `[re, im]`.
pub fn write_complex_binary(path: &Path, values: &[Complex64]) -> Result<()> {
    let bytes: Vec<u8> = values
        .iter()
        .flat_map(|v| [v.re.to_le_bytes(), v.im.to_le_bytes()])
        .flatten()
        .collect();
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_complex_binary(path: &Path) -> Result<Vec<Complex64>> {
    let bytes = fs::read(path)?;
    if bytes.len() % 16 != 0 {
        return Err(Error::Shape {
            expected: bytes.len().next_multiple_of(16),
            got: bytes.len(),
        });
    }
    let f = |b: &[u8]| f64::from_le_bytes(b.try_into().expect("8-byte chunk"));
    Ok(bytes.chunks(16).map(|c| Complex64::new(f(&c[..8]), f(&c[8..]))).collect())
}

pub fn write_real_binary(path: &Path, values: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes)?;
    Ok(())
}
