//! On-disk archive for a [`TripletDatum`]: a JSON manifest plus one raw
//! little-endian `f32` blob per tensor. Blobs stay language-neutral; shape,
//! dtype, and byte order live only in the manifest.

use super::{
    FeatureMap, FeatureStoreError, FeatureTrajectory, Image, Sketch, TripletDatum, VaePyramid,
};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

pub const MANIFEST_VERSION: u32 = 1;
const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("manifest parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported manifest version {0}")]
    Version(u32),
    #[error("unsupported blob encoding {dtype}/{byte_order} for {key}")]
    Encoding {
        key: String,
        dtype: String,
        byte_order: String,
    },
    #[error("missing blob for {key} ({file})")]
    MissingBlob { key: String, file: String },
    #[error("blob {key}: manifest shape {expected:?} implies {expected_bytes} bytes, file has {got_bytes}")]
    ShapeMismatch {
        key: String,
        expected: Vec<usize>,
        expected_bytes: usize,
        got_bytes: usize,
    },
    #[error("blob {key}: checksum mismatch (integrity failure)")]
    Checksum { key: String },
    #[error("manifest incomplete grid: {0}")]
    IncompleteGrid(String),
    #[error("datum invalid: {0}")]
    Datum(#[from] FeatureStoreError),
    #[error("refusing to write non-finite tensor for {key}")]
    NonFinite { key: String },
    #[error("duplicate blob key {0}")]
    DuplicateKey(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlobEntry {
    pub key: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_order: String,
    pub file: String,
    pub checksum: String,
}

/// Archive manifest. Field order is fixed so serialization is byte-stable.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    #[serde(rename = "L")]
    pub layers: usize,
    #[serde(rename = "T")]
    pub timesteps: usize,
    #[serde(rename = "M")]
    pub fusing_steps: usize,
    pub layer_shapes: Vec<(usize, usize, usize)>,
    pub blobs: Vec<BlobEntry>,
}

fn io_err(path: &Path, source: std::io::Error) -> ArchiveError {
    ArchiveError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn tensor_bytes(tensor: &Tensor) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(tensor.len() * 4);
    for v in tensor.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

struct BlobWriter<'a> {
    dir: &'a Path,
    entries: Vec<BlobEntry>,
}

impl<'a> BlobWriter<'a> {
    fn write(&mut self, key: &str, tensor: &Tensor) -> Result<(), ArchiveError> {
        if !tensor.is_finite() {
            return Err(ArchiveError::NonFinite {
                key: key.to_string(),
            });
        }
        let file = format!("{key}.bin");
        let bytes = tensor_bytes(tensor);
        let path = self.dir.join(&file);
        let mut f = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
        f.write_all(&bytes).map_err(|e| io_err(&path, e))?;
        self.entries.push(BlobEntry {
            key: key.to_string(),
            shape: tensor.shape().to_vec(),
            dtype: "f32".to_string(),
            byte_order: "le".to_string(),
            file,
            checksum: sha256_hex(&bytes),
        });
        Ok(())
    }
}

/// Writes `datum` to `path` and returns the content hash of the manifest.
///
/// Identical data always serialize to identical bytes, so saving the same
/// datum twice yields the same digest.
pub fn save_archive(datum: &TripletDatum, path: &Path) -> Result<String, ArchiveError> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))?;
    let mut writer = BlobWriter {
        dir: path,
        entries: Vec::new(),
    };

    let trajectory = &datum.trajectory;
    for layer in 1..=trajectory.layers() {
        for timestep in 0..trajectory.timesteps() {
            let key = format!("traj_l{layer}_t{timestep}");
            writer.write(&key, trajectory.get(layer, timestep).tensor())?;
        }
    }
    for step in 0..datum.pyramid.step_groups() {
        for (n, block) in datum.pyramid.blocks(step).iter().enumerate() {
            let key = format!("vae_s{step}_b{n}");
            writer.write(&key, block.tensor())?;
        }
    }
    writer.write("source", datum.source.tensor())?;
    writer.write("sketch", datum.sketch.tensor())?;

    let manifest = Manifest {
        version: MANIFEST_VERSION,
        layers: trajectory.layers(),
        timesteps: trajectory.timesteps(),
        fusing_steps: datum.pyramid.fusing_steps(),
        layer_shapes: trajectory.layer_shapes(),
        blobs: writer.entries,
    };
    let manifest_bytes = serde_json::to_vec_pretty(&manifest)?;
    let manifest_path = path.join(MANIFEST_FILE);
    fs::write(&manifest_path, &manifest_bytes).map_err(|e| io_err(&manifest_path, e))?;
    Ok(sha256_hex(&manifest_bytes))
}

fn read_blob(dir: &Path, entry: &BlobEntry) -> Result<Tensor, ArchiveError> {
    if entry.dtype != "f32" || entry.byte_order != "le" {
        return Err(ArchiveError::Encoding {
            key: entry.key.clone(),
            dtype: entry.dtype.clone(),
            byte_order: entry.byte_order.clone(),
        });
    }
    let path = dir.join(&entry.file);
    let bytes = fs::read(&path).map_err(|_| ArchiveError::MissingBlob {
        key: entry.key.clone(),
        file: entry.file.clone(),
    })?;
    let expected: usize = entry.shape.iter().product::<usize>() * 4;
    if bytes.len() != expected {
        return Err(ArchiveError::ShapeMismatch {
            key: entry.key.clone(),
            expected: entry.shape.clone(),
            expected_bytes: expected,
            got_bytes: bytes.len(),
        });
    }
    if sha256_hex(&bytes) != entry.checksum {
        return Err(ArchiveError::Checksum {
            key: entry.key.clone(),
        });
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(entry.shape.clone(), data).map_err(|e| ArchiveError::Datum(e.into()))
}

/// Loads a [`TripletDatum`] previously written by [`save_archive`], reporting
/// the offending key on any missing blob, shape mismatch, or integrity
/// failure.
pub fn load_archive(path: &Path) -> Result<TripletDatum, ArchiveError> {
    let manifest_path = path.join(MANIFEST_FILE);
    let manifest_bytes = fs::read(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(ArchiveError::Version(manifest.version));
    }

    let mut by_key: BTreeMap<&str, &BlobEntry> = BTreeMap::new();
    for entry in &manifest.blobs {
        if by_key.insert(entry.key.as_str(), entry).is_some() {
            return Err(ArchiveError::DuplicateKey(entry.key.clone()));
        }
    }
    let lookup = |key: &str| -> Result<&BlobEntry, ArchiveError> {
        by_key
            .get(key)
            .copied()
            .ok_or_else(|| ArchiveError::IncompleteGrid(format!("manifest lists no blob {key}")))
    };

    let mut cells = Vec::with_capacity(manifest.layers * manifest.timesteps);
    for layer in 1..=manifest.layers {
        for timestep in 0..manifest.timesteps {
            let entry = by_key
                .get(format!("traj_l{layer}_t{timestep}").as_str())
                .copied()
                .ok_or(ArchiveError::IncompleteGrid(format!(
                    "missing (layer {layer}, timestep {timestep})"
                )))?;
            let map = FeatureMap::new(read_blob(path, entry)?)?;
            cells.push((layer, timestep, map));
        }
    }
    let trajectory = FeatureTrajectory::from_cells(manifest.layers, manifest.timesteps, cells)?;

    let mut steps = Vec::new();
    for step in 0..=manifest.fusing_steps {
        let mut blocks = Vec::new();
        let mut n = 0;
        while let Some(entry) = by_key.get(format!("vae_s{step}_b{n}").as_str()) {
            blocks.push(FeatureMap::new(read_blob(path, entry)?)?);
            n += 1;
        }
        steps.push(blocks);
    }
    let pyramid = VaePyramid::new(steps)?;

    let source = Image::new(read_blob(path, lookup("source")?)?)?;
    let sketch = Sketch::new(read_blob(path, lookup("sketch")?)?)?;
    Ok(TripletDatum::new(trajectory, pyramid, source, sketch)?)
}
