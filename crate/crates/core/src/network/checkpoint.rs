//! Single-file JSON checkpoints.
//!
//! A checkpoint stores every parameter partition, the prototype, the model
//! configuration and the training hyper-parameters under a format tag.
//! Floats are written in shortest round-trip form, so a reload is
//! bit-identical.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ModelParams;
use crate::error::{Error, Result};
use crate::types::HyperParams;

pub const FORMAT_TAG: &str = "rppg-meta-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub hyper: HyperParams,
    pub params: ModelParams,
    /// Free-form provenance, e.g. the training mode.
    #[serde(default)]
    pub notes: String,
    /// Training epochs finished when this was written (pretraining first).
    #[serde(default)]
    pub completed_epochs: usize,
}

impl Checkpoint {
    pub fn new(params: ModelParams, hyper: HyperParams) -> Self {
        Self {
            format: FORMAT_TAG.to_string(),
            hyper,
            params,
            notes: String::new(),
            completed_epochs: 0,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let text = serde_json::to_string(self).map_err(|e| Error::DecodeError(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::DecodeError(e.to_string()))?;
        if ckpt.format != FORMAT_TAG {
            return Err(Error::DecodeError(format!(
                "unsupported checkpoint format {:?}, expected {FORMAT_TAG:?}",
                ckpt.format
            )));
        }
        ckpt.params.config.validate()?;
        Ok(ckpt)
    }
}
