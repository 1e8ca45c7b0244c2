//! Training, evaluation, checkpoints and ablation sweeps.

mod ablation;
mod checkpoint;
mod config;
mod eval;
pub mod gradcheck;
mod optim;
mod train;

pub use ablation::{ablation_configs, ablation_run, AblationRow, AblationTable};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};
pub use config::{ConfigError, RunConfig, KEYS, SCHEMA_VERSION};
pub use eval::{
    evaluate, report_from_predictions, Accuracy, CategoryRow, EvalReport, ScoredPrediction,
    THRESHOLDS,
};
pub use optim::{Adam, OneCycle, FINAL_LR_FRACTION, WARMUP_FRACTION};
pub use train::{curve_to_rows, prepare, steps_per_epoch, train, train_with, StepRecord, TrainOutcome};

use crate::disco::DiscoError;
use crate::model::ModelError;
use crate::scenegen::VocabularyError;
use crate::tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Disco(#[from] DiscoError),
    #[error(transparent)]
    Vocabulary(#[from] VocabularyError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
}
