//! Experiment orchestration: end-to-end composition, entity-level scoring,
//! configuration, the on-disk stage cache, and the comparison-system runs.

pub mod cache;
pub mod compose;
pub mod config;
pub mod eval;
pub mod runs;

pub use compose::{compose_end_to_end, load_e2e, save_e2e, EndToEndModel};
pub use config::{ExperimentConfig, NeerMatch};
pub use eval::{compute_neer, EvalMetrics, EvalReport, NeerCounts};
pub use runs::{
    run_cascade_baseline, run_matrix, run_oracle, run_proposed, run_synthetic_speech_baseline,
    CascadeMode, MatrixTable, RunContext, SynthMode,
};

use thiserror::Error;

use crate::corpus::CorpusError;
use crate::train::TrainError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("stage cache corrupt at stage `{stage}`: {reason}")]
    CacheCorrupt { stage: String, reason: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl PipelineError {
    /// Process exit code contract: 2 config, 3 data, 4 divergence, 5 cache.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Data(_) | PipelineError::Io(_) => 3,
            PipelineError::Diverged(_) => 4,
            PipelineError::CacheCorrupt { .. } => 5,
        }
    }
}

impl From<TrainError> for PipelineError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { epoch } => {
                PipelineError::Diverged(format!("non-finite loss at epoch {epoch}"))
            }
            other => PipelineError::Data(other.to_string()),
        }
    }
}

impl From<CorpusError> for PipelineError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::Config(msg) => PipelineError::Config(msg),
            other => PipelineError::Data(other.to_string()),
        }
    }
}

impl From<crate::tags::CodecError> for PipelineError {
    fn from(e: crate::tags::CodecError) -> Self {
        PipelineError::Data(e.to_string())
    }
}
