//! Raw little-endian `f64` buffers, JSON sidecars and content hashes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn write_f64_le(path: &Path, values: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_f64_le(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Artifact {
            path: path.to_path_buf(),
            reason: format!("{} bytes is not a whole number of f64 values", bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Artifact {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// JSON description stored next to every binary array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArraySidecar {
    pub file: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub columns: Vec<String>,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub meta: serde_json::Value,
}

/// Writes `<dir>/<name>.f64` and `<dir>/<name>.json`; returns the sidecar path.
pub fn save_array(
    dir: &Path,
    name: &str,
    t: &Tensor,
    columns: &[String],
    meta: serde_json::Value,
) -> Result<PathBuf> {
    let file = format!("{name}.f64");
    write_f64_le(&dir.join(&file), t.data())?;
    let sidecar = ArraySidecar {
        file,
        dtype: "f64le".into(),
        shape: t.shape().to_vec(),
        columns: columns.to_vec(),
        meta,
    };
    let path = dir.join(format!("{name}.json"));
    write_json(&path, &sidecar)?;
    Ok(path)
}

/// Loads an array through its sidecar (`<dir>/<name>.json`).
pub fn load_array(dir: &Path, name: &str) -> Result<(Tensor, ArraySidecar)> {
    let path = dir.join(format!("{name}.json"));
    let sidecar: ArraySidecar = read_json(&path)?;
    let data = read_f64_le(&dir.join(&sidecar.file))?;
    let t = Tensor::new(sidecar.shape.clone(), data).map_err(|e| Error::Artifact {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    Ok((t, sidecar))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn array_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::matrix(2, 3, vec![0.1, -1e-300, f64::MAX, 3.0, 1.0 / 3.0, -0.0]).unwrap();
        save_array(dir.path(), "a", &t, &[], serde_json::json!({"seed": 4})).unwrap();
        let (back, side) = load_array(dir.path(), "a").unwrap();
        assert_eq!(side.shape, vec![2, 3]);
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&t));
    }

    #[test]
    fn truncated_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.f64");
        std::fs::write(&p, [0u8; 12]).unwrap();
        assert!(matches!(read_f64_le(&p), Err(Error::Artifact { .. })));
    }
}
