//! Model checkpoints: every named tensor (including batch-norm running
//! moments) stored exactly as f64, plus the full config as JSON, so a
//! reloaded model reproduces eval outputs bit-for-bit.

use std::path::Path;

use crate::psg_io::bundle::{read_bundle, write_bundle, ArrayEntry, Bundle};
use crate::psg_io::PsgIoError;

use super::{build_architecture, Model, ModelConfig, ModelError};

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] PsgIoError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("checkpoint config unreadable: {0}")]
    BadConfig(String),
}

fn config_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    os.into()
}

pub fn save(path: &Path, model: &Model) -> Result<(), CheckpointError> {
    let mut bundle = Bundle::new();
    for p in model.store.params() {
        bundle.insert(
            p.name.clone(),
            ArrayEntry::f64_nd(p.value.shape().to_vec(), p.value.iter().copied().collect()),
        );
    }
    write_bundle(path, &bundle)?;
    let cfg = serde_json::to_string_pretty(&model.cfg).expect("config serializes");
    std::fs::write(config_path(path), cfg).map_err(|e| {
        CheckpointError::Io(PsgIoError::Io { path: path.display().to_string(), source: e })
    })?;
    Ok(())
}

/// Rebuilds the architecture from the stored config and loads every tensor
/// by name. Missing or misshapen tensors are errors.
pub fn load(path: &Path) -> Result<Model, CheckpointError> {
    let cfg_text = std::fs::read_to_string(config_path(path))
        .map_err(|e| CheckpointError::BadConfig(e.to_string()))?;
    let cfg: ModelConfig =
        serde_json::from_str(&cfg_text).map_err(|e| CheckpointError::BadConfig(e.to_string()))?;
    let mut model = build_architecture(&cfg)?;
    let bundle = read_bundle(path)?;
    for p in model.store.params_mut() {
        let entry = bundle.get(&p.name).ok_or_else(|| {
            CheckpointError::Model(ModelError::CheckpointMismatch(format!("missing tensor {}", p.name)))
        })?;
        if entry.shape != p.value.shape() {
            return Err(CheckpointError::Model(ModelError::CheckpointMismatch(format!(
                "tensor {} has shape {:?}, expected {:?}",
                p.name,
                entry.shape,
                p.value.shape()
            ))));
        }
        let data = entry.as_f64().ok_or_else(|| {
            CheckpointError::Model(ModelError::CheckpointMismatch(format!(
                "tensor {} is not f64",
                p.name
            )))
        })?;
        for (dst, src) in p.value.iter_mut().zip(data) {
            *dst = *src;
        }
    }
    Ok(model)
}
