//! Checkpoints are safetensors files. Tensor names are the model's parameter
//! and buffer names; the `hemoseg` metadata entry holds [`CheckpointMeta`] as JSON.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Tensor};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use super::{build_model, cpu, NetworkConfig, SegNet};
use crate::error::{Error, Result};
use crate::preprocessing::InputStrategy;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const META_KEY: &str = "hemoseg";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub network: NetworkConfig,
    /// Input construction the model was trained with.
    pub strategy: InputStrategy,
    /// Patch size used in training; inference pads slices up to at least this.
    pub input_size: [usize; 2],
    pub init_seed: u64,
    pub epoch: Option<usize>,
    pub val_dice: Option<f64>,
    pub fold: Option<usize>,
}

impl CheckpointMeta {
    pub fn new(
        network: NetworkConfig,
        strategy: InputStrategy,
        input_size: [usize; 2],
        init_seed: u64,
    ) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            network,
            strategy,
            input_size,
            init_seed,
            epoch: None,
            val_dice: None,
            fold: None,
        }
    }
}

pub fn save_checkpoint(
    model: &SegNet,
    meta: &CheckpointMeta,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    if &meta.network != model.config() {
        return Err(Error::arg(
            "checkpoint metadata does not describe this model",
        ));
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let tensors: Vec<(String, Tensor)> = model
        .params()
        .iter()
        .chain(model.buffers())
        .map(|(name, var)| (name.clone(), var.as_tensor().clone()))
        .collect();
    // a single entry keeps the serialized header byte-stable
    let mut info = HashMap::new();
    info.insert(META_KEY.to_string(), serde_json::to_string(meta)?);
    safetensors::serialize_to_file(tensors, Some(info), path).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(())
}

/// Rebuilds the model described by the checkpoint and restores every
/// parameter and buffer bit for bit.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(SegNet, CheckpointMeta)> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    let bad = |reason: String| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    let bytes = std::fs::read(path)?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
    let info = header
        .metadata()
        .as_ref()
        .ok_or_else(|| bad("missing metadata".into()))?;
    let meta: CheckpointMeta = serde_json::from_str(
        info.get(META_KEY)
            .ok_or_else(|| bad(format!("missing {META_KEY:?} metadata")))?,
    )
    .map_err(|e| bad(e.to_string()))?;
    if meta.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(bad(format!(
            "unsupported format version {} (expected {CHECKPOINT_FORMAT_VERSION})",
            meta.format_version
        )));
    }
    let mut tensors = candle_core::safetensors::load_buffer(&bytes, &cpu())?;
    let dtype = match tensors.values().next().map(Tensor::dtype) {
        Some(DType::F64) => DType::F64,
        _ => DType::F32,
    };
    let model = build_model(&meta.network, meta.init_seed, dtype)?;
    for (name, var) in model.params().iter().chain(model.buffers()) {
        let t = tensors
            .remove(name)
            .ok_or_else(|| bad(format!("missing tensor {name}")))?;
        if t.dims() != var.dims() || t.dtype() != var.dtype() {
            return Err(bad(format!(
                "tensor {name}: stored {:?} {:?}, expected {:?} {:?}",
                t.dims(),
                t.dtype(),
                var.dims(),
                var.dtype()
            )));
        }
        var.set(&t)?;
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(bad(format!("unexpected tensor {extra}")));
    }
    Ok((model, meta))
}
