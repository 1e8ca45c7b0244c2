//! Checkpoints: one JSON document holding the format tag, the run config in
//! its text form, and every parameter tensor by name.

use super::{EngineError, RunConfig};
use crate::model::ModelParams;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CHECKPOINT_FORMAT: &str = "bevground-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: ModelParams,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointRecord {
    format: String,
    version: u32,
    config: String,
    params: Vec<TensorRecord>,
}

pub fn write_checkpoint(c: &Checkpoint) -> String {
    let record = CheckpointRecord {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: c.config.to_text(),
        params: c
            .params
            .iter()
            .map(|(name, t)| TensorRecord {
                name: name.into(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect(),
    };
    serde_json::to_string(&record).expect("plain data") + "\n"
}

pub fn read_checkpoint(text: &str, origin: &str) -> Result<Checkpoint, EngineError> {
    let fail = |message: String| EngineError::Format {
        path: origin.into(),
        message,
    };
    let record: CheckpointRecord = serde_json::from_str(text).map_err(|e| fail(e.to_string()))?;
    if record.format != CHECKPOINT_FORMAT || record.version != CHECKPOINT_VERSION {
        return Err(fail(format!(
            "unsupported checkpoint {} v{} (expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION})",
            record.format, record.version
        )));
    }
    let config = RunConfig::parse_text(&record.config, RunConfig::desk(), origin)?;
    config.validate()?;
    let named = record
        .params
        .into_iter()
        .map(|r| Ok((r.name, Tensor::new(r.shape, r.data)?)))
        .collect::<Result<Vec<_>, EngineError>>()?;
    let params = ModelParams::from_named(&config.model_config(), named)?;
    Ok(Checkpoint { config, params })
}

pub fn save_checkpoint(path: &Path, c: &Checkpoint) -> Result<(), EngineError> {
    std::fs::write(path, write_checkpoint(c)).map_err(|source| EngineError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, EngineError> {
    let text = std::fs::read_to_string(path).map_err(|source| EngineError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_checkpoint(&text, &path.display().to_string())
}
