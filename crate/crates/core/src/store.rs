//! Feature store: a little-endian `f32` row matrix with a JSON sidecar manifest
//! at `<path>.json`.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureManifest {
    pub ids: Vec<String>,
    pub dim: usize,
    pub normalized: bool,
}

/// Location of the JSON sidecar for a binary matrix file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

pub fn write_rows(path: &Path, rows: &Array2<f64>) -> Result<()> {
    let mut bytes = Vec::with_capacity(rows.len() * 4);
    for v in rows.iter() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    write_atomic(path, &bytes)
}

pub fn read_rows(path: &Path, nrows: usize, ncols: usize) -> Result<Array2<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != nrows * ncols * 4 {
        return Err(Error::format(format!(
            "{}: {} bytes, expected {nrows}x{ncols} f32 values",
            path.display(),
            bytes.len()
        )));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Array2::from_shape_vec((nrows, ncols), values).map_err(|e| Error::format(e.to_string()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

/// Writes through a temporary file in the same directory and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Saves a feature matrix with its id manifest.
pub fn save_features(path: &Path, ids: &[String], rows: &Array2<f64>, normalized: bool) -> Result<()> {
    if ids.len() != rows.nrows() {
        return Err(Error::input(format!(
            "{} ids for {} rows",
            ids.len(),
            rows.nrows()
        )));
    }
    write_rows(path, rows)?;
    write_json(
        &sidecar_path(path),
        &FeatureManifest {
            ids: ids.to_vec(),
            dim: rows.ncols(),
            normalized,
        },
    )
}

pub fn load_features(path: &Path) -> Result<(FeatureManifest, Array2<f64>)> {
    let manifest: FeatureManifest = read_json(&sidecar_path(path))?;
    let rows = read_rows(path, manifest.ids.len(), manifest.dim)?;
    Ok((manifest, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn features_round_trip_through_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("feats.bin");
        let rows = Array2::from_shape_fn((3, 4), |(i, j)| i as f64 * 0.5 - j as f64 * 0.25);
        let ids: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        save_features(&path, &ids, &rows, false).unwrap();
        let (manifest, back) = load_features(&path).unwrap();
        assert_eq!(manifest.ids, ids);
        assert_eq!(manifest.dim, 4);
        assert_eq!(back, rows);
        assert!(sidecar_path(&path).ends_with("feats.bin.json"));
    }

    #[test]
    fn truncated_matrix_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("feats.bin");
        let rows = Array2::zeros((2, 2));
        save_features(&path, &["x".into(), "y".into()], &rows, true).unwrap();
        fs::write(&path, [0u8; 7]).unwrap();
        assert!(matches!(load_features(&path), Err(Error::Format(_))));
    }
}
