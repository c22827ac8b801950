//! Sample matrices on disk: raw little-endian f64 rows plus a JSON sidecar
//! at `<path>.json` carrying shape, seed and config hash.

use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixMeta {
    pub rows: usize,
    pub cols: usize,
    pub seed: u64,
    pub config_hash: String,
    /// What produced the rows, e.g. a predictor name or `data`.
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampler_steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn write_matrix(path: &Path, data: ArrayView2<f64>, meta: &MatrixMeta) -> Result<()> {
    if data.dim() != (meta.rows, meta.cols) {
        return Err(Error::Shape(format!(
            "matrix is {:?}, sidecar says {}×{}",
            data.dim(),
            meta.rows,
            meta.cols
        )));
    }
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_atomic(path, &bytes)?;
    let json =
        serde_json::to_string_pretty(meta).map_err(|e| Error::Format(format!("sidecar: {e}")))?;
    write_atomic(&sidecar_path(path), json.as_bytes())
}

pub fn read_matrix(path: &Path) -> Result<(Array2<f64>, MatrixMeta)> {
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: MatrixMeta = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", side.display())))?;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != meta.rows * meta.cols * 8 {
        return Err(Error::Format(format!(
            "{}: {} bytes do not hold a {}×{} f64 matrix",
            path.display(),
            bytes.len(),
            meta.rows,
            meta.cols
        )));
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let data = Array2::from_shape_vec((meta.rows, meta.cols), values).expect("length checked");
    Ok((data, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let data = Array2::from_shape_fn((3, 2), |(i, j)| i as f64 - 0.1 * j as f64);
        let meta = MatrixMeta {
            rows: 3,
            cols: 2,
            seed: 9,
            config_hash: "h".into(),
            source: "baseline".into(),
            sampler_steps: Some(20),
            eta: None,
        };
        write_matrix(&path, data.view(), &meta).unwrap();
        let (back, m) = read_matrix(&path).unwrap();
        assert_eq!(back, data);
        assert_eq!(m, meta);
        std::fs::write(&path, [0u8; 5]).unwrap();
        assert!(matches!(read_matrix(&path), Err(Error::Format(_))));
    }
}
