//! Checkpoints in the safetensors format.
//!
//! Parameters are stored as little-endian f32 tensors under their layer
//! names. Metadata carries the model configuration as JSON, a format
//! version and, when optimizer state is included, the Adam step; the Adam
//! moments are stored as `adam.m.<name>` / `adam.v.<name>`.

use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::training::Adam;

pub const FORMAT_VERSION: &str = "1";

fn le_bytes(data: &[f32]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn ckpt_err(e: impl std::fmt::Display) -> Error {
    Error::Checkpoint(e.to_string())
}

/// Serializes the model and, optionally, optimizer state.
pub fn to_bytes(model: &Model<f32>, optimizer: Option<&Adam>) -> Result<Vec<u8>> {
    let mut buffers: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    for p in model.params().iter() {
        buffers.push((p.name.clone(), p.shape.clone(), le_bytes(&p.data)));
    }
    let mut metadata = HashMap::new();
    metadata.insert("format_version".to_string(), FORMAT_VERSION.to_string());
    metadata.insert(
        "model_config".to_string(),
        serde_json::to_string(model.config()).expect("config serializes"),
    );
    if let Some(adam) = optimizer {
        metadata.insert("adam_step".to_string(), adam.step.to_string());
        for (i, p) in model.params().iter().enumerate() {
            buffers.push((format!("adam.m.{}", p.name), p.shape.clone(), le_bytes(&adam.m[i])));
            buffers.push((format!("adam.v.{}", p.name), p.shape.clone(), le_bytes(&adam.v[i])));
        }
    }
    let views = buffers
        .iter()
        .map(|(name, shape, bytes)| Ok((name.as_str(), TensorView::new(Dtype::F32, shape.clone(), bytes).map_err(ckpt_err)?)))
        .collect::<Result<Vec<_>>>()?;
    safetensors::serialize(views, &Some(metadata)).map_err(ckpt_err)
}

fn read_f32(st: &SafeTensors<'_>, name: &str, shape: &[usize]) -> Result<Vec<f32>> {
    let view = st.tensor(name).map_err(|_| Error::Checkpoint(format!("missing tensor {name}")))?;
    if view.dtype() != Dtype::F32 {
        return Err(Error::Checkpoint(format!("tensor {name} has dtype {:?}, expected F32", view.dtype())));
    }
    if view.shape() != shape {
        return Err(Error::Checkpoint(format!(
            "tensor {name} has shape {:?}, expected {:?}",
            view.shape(),
            shape
        )));
    }
    Ok(view
        .data()
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

/// Restored model and, when present, optimizer state.
pub struct Loaded {
    pub model: Model<f32>,
    pub optimizer: Option<Adam>,
}

pub fn from_bytes(bytes: &[u8]) -> Result<Loaded> {
    let (_, header) = SafeTensors::read_metadata(bytes).map_err(ckpt_err)?;
    let meta = header
        .metadata()
        .as_ref()
        .ok_or_else(|| Error::Checkpoint("missing metadata".into()))?;
    match meta.get("format_version").map(String::as_str) {
        Some(FORMAT_VERSION) => {}
        other => return Err(Error::Checkpoint(format!("unsupported format version {other:?}"))),
    }
    let config: ModelConfig = serde_json::from_str(
        meta.get("model_config")
            .ok_or_else(|| Error::Checkpoint("missing model_config".into()))?,
    )
    .map_err(ckpt_err)?;
    config.validate()?;
    let adam_step = meta
        .get("adam_step")
        .map(|s| s.parse::<u64>().map_err(ckpt_err))
        .transpose()?;

    let st = SafeTensors::deserialize(bytes).map_err(ckpt_err)?;
    let model = Model::<f32>::zeroed(config)?;
    let mut store = model.params().clone();
    let expected = store.len() * if adam_step.is_some() { 3 } else { 1 };
    if st.len() != expected {
        return Err(Error::Checkpoint(format!(
            "expected {expected} tensors, found {}",
            st.len()
        )));
    }
    let mut m = Vec::new();
    let mut v = Vec::new();
    for p in store.iter_mut() {
        p.data = read_f32(&st, &p.name, &p.shape)?;
        if adam_step.is_some() {
            m.push(read_f32(&st, &format!("adam.m.{}", p.name), &p.shape)?);
            v.push(read_f32(&st, &format!("adam.v.{}", p.name), &p.shape)?);
        }
    }
    let model = model.with_params(store)?;
    let optimizer = adam_step.map(|step| {
        let mut adam = Adam::new(&model);
        adam.step = step;
        adam.m = m;
        adam.v = v;
        adam
    });
    Ok(Loaded { model, optimizer })
}

pub fn save(path: &Path, model: &Model<f32>, optimizer: Option<&Adam>) -> Result<()> {
    let bytes = to_bytes(model, optimizer)?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Loaded> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Short fingerprint of the weights and configuration (hex SHA-256 prefix).
pub fn checkpoint_id(model: &Model<f32>) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_string(model.config()).expect("config serializes"));
    for p in model.params().iter() {
        h.update(p.name.as_bytes());
        h.update(le_bytes(&p.data));
    }
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}
