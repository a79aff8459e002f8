//! Binary container for named `f64` tensors. One file holds every tensor of
//! a model; a JSON sidecar (written by the owner) carries the configuration.
//!
//! Layout per entry: name length (u32 LE), name bytes, rank (u32 LE), dims
//! (u64 LE each), data (f64 LE each). Entries are written in the order given,
//! which owners keep fixed so files are byte-stable.

use crate::autodiff::Arr;
use sha2::{Digest, Sha256};
use std::fs;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 8] = b"DSKTNSR1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("not a tensor container (bad magic)")]
    BadMagic,
    #[error("container truncated while reading {0}")]
    Truncated(String),
    #[error("tensor {0} contains non-finite values")]
    NonFinite(String),
    #[error("expected tensor {expected}, found {got}")]
    NameMismatch { expected: String, got: String },
    #[error("tensor {name} has shape {got:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path, source: std::io::Error) -> CheckpointError {
    CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Serializes named tensors and returns the SHA-256 hex digest of the bytes.
pub fn write_named_tensors(
    path: &Path,
    tensors: &[(String, &Arr)],
) -> Result<String, CheckpointError> {
    let mut bytes: Vec<u8> = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, arr) in tensors {
        if !arr.is_finite() {
            return Err(CheckpointError::NonFinite(name.clone()));
        }
        bytes.extend_from_slice(&(name.len() as u32).to_le_bytes());
        bytes.extend_from_slice(name.as_bytes());
        bytes.extend_from_slice(&(arr.shape.len() as u32).to_le_bytes());
        for &d in &arr.shape {
            bytes.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &arr.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    file.write_all(&bytes).map_err(|e| io_err(path, e))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

/// Reads every named tensor in file order.
pub fn read_named_tensors(path: &Path) -> Result<Vec<(String, Arr)>, CheckpointError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], CheckpointError> {
        if *pos + n > bytes.len() {
            return Err(CheckpointError::Truncated(format!("offset {pos}")));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 8)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().expect("4 bytes")) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len =
            u32::from_le_bytes(take(&mut pos, 4)?.try_into().expect("4 bytes")) as usize;
        let name = String::from_utf8_lossy(take(&mut pos, name_len)?).into_owned();
        let rank = u32::from_le_bytes(take(&mut pos, 4)?.try_into().expect("4 bytes")) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().expect("8 bytes")) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f64::from_le_bytes(
                take(&mut pos, 8)?.try_into().expect("8 bytes"),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CheckpointError::NonFinite(name));
        }
        out.push((name, Arr::new(shape, data)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_names_shapes_and_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let a = Arr::new(vec![2, 3], vec![1.5, -2.25, 0.0, 1e-300, 7.0, -0.125]);
        let b = Arr::scalar(42.0);
        let d1 = write_named_tensors(&path, &[("alpha".into(), &a), ("beta".into(), &b)]).unwrap();
        let loaded = read_named_tensors(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].0, "alpha");
        assert_eq!(loaded[0].1, a);
        assert_eq!(loaded[1].1, b);
        let d2 = write_named_tensors(&path, &[("alpha".into(), &a), ("beta".into(), &b)]).unwrap();
        assert_eq!(d1, d2);
    }

    #[test]
    fn truncation_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let a = Arr::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]);
        write_named_tensors(&path, &[("x".into(), &a)]).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            read_named_tensors(&path),
            Err(CheckpointError::Truncated(_))
        ));
    }
}
