//! Model checkpoints: one binary file holding a JSON manifest (config plus a
//! tensor directory) followed by raw little-endian f64 payloads, and a bare
//! JSON array for scale vectors. Same model in, byte-identical file out.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{init_model, Model, ModelConfig, ScaleVector};

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Element offset into the payload region.
    offset: usize,
    /// Element count.
    len: usize,
}

/// Serializes the model to `path`: 8-byte LE manifest length, the JSON
/// manifest, then every tensor's f64 data little-endian in manifest order.
pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let named = model.named_tensors();
    let mut entries = Vec::with_capacity(named.len());
    let mut offset = 0usize;
    for (name, t) in &named {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            len: t.len(),
        });
        offset += t.len();
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        config: model.config.clone(),
        tensors: entries,
    };
    let manifest_json =
        serde_json::to_vec(&manifest).map_err(|e| Error::Serde(e.to_string()))?;

    let mut buf =
        Vec::with_capacity(8 + manifest_json.len() + offset * std::mem::size_of::<f64>());
    buf.extend_from_slice(&(manifest_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&manifest_json);
    for (_, t) in &named {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(path, &buf)
}

/// Loads a checkpoint written by `save_model`, validating version, config,
/// and the tensor directory against the config's expected layout.
pub fn load_model(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 {
        return Err(Error::Data(format!(
            "checkpoint {} truncated: {} bytes",
            path.display(),
            bytes.len()
        )));
    }
    let manifest_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let payload_start = 8 + manifest_len;
    if bytes.len() < payload_start {
        return Err(Error::Data(format!(
            "checkpoint {} manifest overruns file",
            path.display()
        )));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[8..payload_start])
        .map_err(|e| Error::Serde(format!("checkpoint manifest: {e}")))?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::Data(format!(
            "checkpoint version {} unsupported (expected {FORMAT_VERSION})",
            manifest.version
        )));
    }
    manifest.config.validate()?;

    let payload = &bytes[payload_start..];
    if payload.len() % 8 != 0 {
        return Err(Error::Data(format!(
            "checkpoint {} payload length {} not a multiple of 8",
            path.display(),
            payload.len()
        )));
    }
    let total: usize = manifest.tensors.iter().map(|e| e.len).sum();
    if payload.len() != total * 8 {
        return Err(Error::Data(format!(
            "checkpoint payload holds {} values, manifest expects {total}",
            payload.len() / 8
        )));
    }

    // build a skeleton with the right layout, then fill from the directory
    let mut model = init_model(&manifest.config)?;
    let mut filled = vec![false; manifest.tensors.len()];
    {
        let mut named = model.named_tensors_mut();
        if named.len() != manifest.tensors.len() {
            return Err(Error::Data(format!(
                "checkpoint lists {} tensors, config implies {}",
                manifest.tensors.len(),
                named.len()
            )));
        }
        for (name, t) in named.iter_mut() {
            let (i, entry) = manifest
                .tensors
                .iter()
                .enumerate()
                .find(|(_, e)| e.name == *name)
                .ok_or_else(|| Error::Data(format!("checkpoint missing tensor {name}")))?;
            if entry.shape != t.shape() || entry.len != t.len() {
                return Err(Error::Data(format!(
                    "tensor {name} has shape {:?} in checkpoint, expected {:?}",
                    entry.shape,
                    t.shape()
                )));
            }
            let start = entry.offset * 8;
            let end = start + entry.len * 8;
            if end > payload.len() {
                return Err(Error::Data(format!(
                    "tensor {name} payload range {start}..{end} overruns file"
                )));
            }
            for (j, chunk) in payload[start..end].chunks_exact(8).enumerate() {
                t.data_mut()[j] = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            }
            filled[i] = true;
        }
    }
    if let Some(i) = filled.iter().position(|f| !f) {
        return Err(Error::Data(format!(
            "checkpoint tensor {} not part of the model layout",
            manifest.tensors[i].name
        )));
    }
    for (name, t) in model.named_tensors() {
        t.assert_finite(&name)?;
    }
    Ok(model)
}

/// Scale vectors travel as a bare JSON array of per-head values; the
/// constraint floor is re-derived from the model config at load.
pub fn save_scales(scales: &ScaleVector, path: &Path) -> Result<()> {
    let json = serde_json::to_vec(scales.values()).map_err(|e| Error::Serde(e.to_string()))?;
    write_atomic(path, &json)
}

pub fn load_scales(path: &Path, config: &ModelConfig) -> Result<ScaleVector> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let values: Vec<f64> = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Serde(format!("scale vector {}: {e}", path.display())))?;
    if values.len() != config.total_heads() {
        return Err(Error::Data(format!(
            "scale vector {} holds {} entries, model has {} heads",
            path.display(),
            values.len(),
            config.total_heads()
        )));
    }
    ScaleVector::new(values, config.default_lambda())
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
