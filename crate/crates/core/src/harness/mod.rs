//! Run orchestration: configuration, checkpoints, metrics and the
//! train / eval / reconstruct / ablate commands.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::classifier::ClassifierError;
use crate::data::DataError;
use crate::metalearn::MetaError;
use crate::siren::SirenError;
use crate::tensor::TensorError;

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod metrics;
pub mod state;
pub mod train;

pub use checkpoint::Checkpoint;
pub use commands::{ablate, ablate_on, cmd_eval, cmd_reconstruct, evaluate, reconstruct, AblationRow, EvalSummary, ReconRow, AXES};
pub use config::{DataConfig, DataFormat, RunConfig};
pub use metrics::{psnr, MetricRecord};
pub use state::TrainState;
pub use train::{load_data, split_data, train, train_on, TrainOutcome};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("unknown ablation axis {axis:?}; expected one of {known}")]
    UnknownAxis { axis: String, known: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint holds {got} SIREN parameters but its config implies {expected}")]
    ParamMismatch { expected: usize, got: usize },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {detail}")]
    Csv { path: PathBuf, detail: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Meta(#[from] MetaError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Siren(#[from] SirenError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl HarnessError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io { path: path.to_path_buf(), source }
    }
}
