//! Tensor container (JSON manifest + one raw little-endian blob) and the
//! training checkpoint built on it. Attention dumps use the same container.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Model, ModelConfig};
use crate::numerics::{Params, Tensor};
use crate::training::OptimizerState;

pub const MANIFEST: &str = "manifest.json";
pub const BLOB: &str = "params.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn width(&self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dtype: DType,
    pub blob: String,
    pub tensors: Vec<TensorEntry>,
    pub meta: serde_json::Value,
}

fn ckpt_err(path: &Path, detail: impl ToString) -> Error {
    Error::Checkpoint { path: path.to_path_buf(), detail: detail.to_string() }
}

/// Writes `entries` into `dir` (created if needed).
pub fn write_container(dir: &Path, dtype: DType, entries: &[(String, Tensor)], meta: serde_json::Value) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| ckpt_err(dir, e))?;
    let mut blob = Vec::new();
    let mut tensors = Vec::with_capacity(entries.len());
    for (name, t) in entries {
        tensors.push(TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset: blob.len() as u64 });
        for &x in t.data() {
            match dtype {
                DType::F32 => blob.extend_from_slice(&(x as f32).to_le_bytes()),
                DType::F64 => blob.extend_from_slice(&x.to_le_bytes()),
            }
        }
    }
    let manifest = Manifest { dtype, blob: BLOB.into(), tensors, meta };
    let text = serde_json::to_string_pretty(&manifest)?;
    let blob_path = dir.join(BLOB);
    std::fs::write(&blob_path, &blob).map_err(|e| ckpt_err(&blob_path, e))?;
    let manifest_path = dir.join(MANIFEST);
    std::fs::write(&manifest_path, text).map_err(|e| ckpt_err(&manifest_path, e))?;
    Ok(())
}

pub fn read_container(dir: &Path) -> Result<(Manifest, Vec<(String, Tensor)>)> {
    let manifest_path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| ckpt_err(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| ckpt_err(&manifest_path, e))?;
    let blob_path = dir.join(&manifest.blob);
    let blob = std::fs::read(&blob_path).map_err(|e| ckpt_err(&blob_path, e))?;
    let w = manifest.dtype.width();
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        let n: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let bytes = blob
            .get(start..start + n * w)
            .ok_or_else(|| ckpt_err(&blob_path, format!("{} runs past the end of the blob", entry.name)))?;
        let data = bytes
            .chunks_exact(w)
            .map(|c| match manifest.dtype {
                DType::F32 => f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64,
                DType::F64 => f64::from_le_bytes(c.try_into().expect("8 bytes")),
            })
            .collect();
        out.push((entry.name.clone(), Tensor::new(entry.shape.clone(), data)?));
    }
    Ok((manifest, out))
}

/// Training progress stored with a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: u64,
    pub model: ModelConfig,
    pub seed: u64,
    pub tokens_seen: u64,
    pub train_flops: f64,
    pub optimizer_step: u64,
}

pub struct Checkpoint {
    pub model: Model,
    pub optimizer: OptimizerState,
    pub meta: CheckpointMeta,
}

const OPT_PREFIX: &str = "optimizer.v.";

pub fn checkpoint_dir(run_dir: &Path, step: u64) -> PathBuf {
    run_dir.join(step.to_string())
}

/// Saves parameters and optimizer state under `<run_dir>/<step>/`.
pub fn save_checkpoint(
    run_dir: &Path,
    model: &Model,
    optimizer: &OptimizerState,
    meta: &CheckpointMeta,
    dtype: DType,
) -> Result<PathBuf> {
    let dir = checkpoint_dir(run_dir, meta.step);
    let mut entries: Vec<(String, Tensor)> =
        model.params.iter().map(|(_, name, t)| (name.to_string(), t.clone())).collect();
    for ((_, name, t), v) in model.params.iter().zip(&optimizer.v) {
        entries.push((format!("{OPT_PREFIX}{name}"), Tensor::new(t.shape().to_vec(), v.clone())?));
    }
    write_container(&dir, dtype, &entries, serde_json::to_value(meta)?)?;
    Ok(dir)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let (manifest, tensors) = read_container(dir)?;
    let meta: CheckpointMeta =
        serde_json::from_value(manifest.meta).map_err(|e| ckpt_err(&dir.join(MANIFEST), e))?;
    let mut params = Params::new();
    let mut v = Vec::new();
    for (name, t) in tensors {
        match name.strip_prefix(OPT_PREFIX) {
            Some(_) => v.push(t.into_data()),
            None => {
                if params.id(&name).is_some() {
                    return Err(ckpt_err(dir, format!("duplicate tensor {name}")));
                }
                params.add(name, t);
            }
        }
    }
    if v.len() != params.len() {
        return Err(ckpt_err(dir, "optimizer state does not cover every parameter"));
    }
    let model = Model::from_params(meta.model.clone(), params).map_err(|e| ckpt_err(dir, e))?;
    let optimizer = OptimizerState { v, step: meta.optimizer_step };
    Ok(Checkpoint { model, optimizer, meta })
}

/// Most recent `<run_dir>/<step>` directory holding a manifest.
pub fn latest_checkpoint(run_dir: &Path) -> Result<Option<PathBuf>> {
    if !run_dir.is_dir() {
        return Ok(None);
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in std::fs::read_dir(run_dir)? {
        let path = entry?.path();
        let step = path.file_name().and_then(|n| n.to_str()).and_then(|n| n.parse::<u64>().ok());
        if let Some(step) = step {
            if path.join(MANIFEST).is_file() && best.as_ref().is_none_or(|(b, _)| step > *b) {
                best = Some((step, path));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}
