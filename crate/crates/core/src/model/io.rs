//! Weight manifest: a JSON listing of `(name, shape, dtype, offset)` next to
//! one little-endian, row-major `f32` binary blob.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BlockWeights, LayerId, LayerKind, ModelConfig, ModelWeights};
use crate::error::{Error, Result};
use crate::num::Scalar;
use crate::tensor::Matrix;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the data file.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightManifest {
    pub version: u32,
    pub config: ModelConfig,
    /// Data file, relative to the manifest's directory.
    pub data_file: String,
    pub tensors: Vec<TensorEntry>,
}

fn data_path(manifest_path: &Path, manifest: &WeightManifest) -> PathBuf {
    manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&manifest.data_file)
}

/// Write `model` as `<manifest_path>` plus a sibling `.bin` data file.
pub fn export_weights<T: Scalar>(model: &ModelWeights<T>, manifest_path: &Path) -> Result<WeightManifest> {
    let stem = manifest_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("model");
    let data_file = format!("{stem}.bin");
    let mut tensors = Vec::new();
    let mut blob = Vec::new();
    model.for_each_tensor(|name, shape, data| {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            dtype: "f32".into(),
            offset: blob.len() as u64,
        });
        for v in data {
            blob.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    });
    let manifest = WeightManifest {
        version: MANIFEST_VERSION,
        config: model.config,
        data_file,
        tensors,
    };
    if let Some(dir) = manifest_path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let dp = data_path(manifest_path, &manifest);
    fs::write(&dp, &blob).map_err(|e| Error::io(&dp, e))?;
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(manifest_path, text).map_err(|e| Error::io(manifest_path, e))?;
    Ok(manifest)
}

fn read_manifest(manifest_path: &Path) -> Result<WeightManifest> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: WeightManifest = serde_json::from_str(&text)
        .map_err(|e| Error::format(manifest_path, e.to_string()))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::format(
            manifest_path,
            format!("unsupported manifest version {}", manifest.version),
        ));
    }
    manifest.config.validate()?;
    Ok(manifest)
}

pub fn load_weights<T: Scalar>(manifest_path: &Path) -> Result<ModelWeights<T>> {
    let manifest = read_manifest(manifest_path)?;
    let dp = data_path(manifest_path, &manifest);
    let blob = fs::read(&dp).map_err(|e| Error::io(&dp, e))?;
    let cfg = manifest.config;
    let entries: HashMap<&str, &TensorEntry> =
        manifest.tensors.iter().map(|t| (t.name.as_str(), t)).collect();

    let fetch = |name: &str, shape: &[usize]| -> Result<Vec<T>> {
        let entry = entries
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        if entry.shape != shape {
            return Err(Error::Shape {
                tensor: name.to_string(),
                expected: shape.to_vec(),
                found: entry.shape.clone(),
            });
        }
        if entry.dtype != "f32" {
            return Err(Error::format(&dp, format!("tensor `{name}` has dtype {}", entry.dtype)));
        }
        let count: usize = shape.iter().product();
        let start = entry.offset as usize;
        let end = start + count * 4;
        if end > blob.len() {
            return Err(Error::io(
                &dp,
                std::io::Error::new(
                    std::io::ErrorKind::UnexpectedEof,
                    format!("tensor `{name}` extends past end of data file"),
                ),
            ));
        }
        Ok(blob[start..end]
            .chunks_exact(4)
            .map(|b| T::from_f64_lossy(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect())
    };
    let matrix = |name: &str, rows: usize, cols: usize| -> Result<Matrix<T>> {
        Ok(Matrix::from_vec(rows, cols, fetch(name, &[rows, cols])?))
    };

    let d = cfg.d_model;
    let embed = matrix("embed", cfg.vocab, d)?;
    let pos_embed = matrix("pos_embed", cfg.seq_cap, d)?;
    let mut blocks = Vec::with_capacity(cfg.n_blocks);
    for b in 0..cfg.n_blocks {
        let attn_norm = fetch(&format!("blocks.{b}.attn_norm"), &[d])?;
        let mlp_norm = fetch(&format!("blocks.{b}.mlp_norm"), &[d])?;
        let mut linears = Vec::with_capacity(7);
        for kind in LayerKind::ALL {
            let (r, c) = cfg.linear_shape(kind);
            linears.push(matrix(&LayerId::new(b, kind).tensor_name(), r, c)?);
        }
        blocks.push(BlockWeights {
            attn_norm,
            mlp_norm,
            linears,
        });
    }
    let final_norm = fetch("final_norm", &[d])?;
    let lm_head = matrix("lm_head", cfg.vocab, d)?;
    Ok(ModelWeights {
        config: cfg,
        embed,
        pos_embed,
        blocks,
        final_norm,
        lm_head,
    })
}

/// SHA-256 over the canonical config and every tensor as stored (`f32` LE).
pub fn model_hash<T: Scalar>(model: &ModelWeights<T>) -> String {
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(&model.config).expect("config serializes"));
    model.for_each_tensor(|name, _, data| {
        hasher.update(name.as_bytes());
        for v in data {
            hasher.update((v.as_f64() as f32).to_le_bytes());
        }
    });
    hex::encode(hasher.finalize())
}
