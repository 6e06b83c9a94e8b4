//! Training, evaluation, checkpointing and the command implementations.

mod checkpoint;
mod config;
mod dataset;
mod eval;
mod gradsuite;
mod model;
mod plot;
mod tracks;
mod train;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, RngState,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::TrainConfig;
pub use dataset::Dataset;
pub use eval::{evaluate, evaluate_images, render_view, EvalReport, EvalRow, Split};
pub use gradsuite::{check_grad, GradSuiteConfig, GradSuiteReport, GradTermReport};
pub use model::Model;
pub use plot::{plot_eval, plot_metrics};
pub use tracks::{fit_twist_cmd, FitTwistReport, PairFit};
pub use train::{
    read_metrics, train, train_from, MetricsRecord, RayBatch, StepResult, TrainOutcome, Trainer,
    CHECKPOINT_FILE, METRICS_FILE,
};

use thiserror::Error;

use crate::ad::AdError;
use crate::hexplane::FieldError;
use crate::physics_losses::LossError;
use crate::render::RenderError;
use crate::scenegen::SceneError;
use crate::se3field::Se3Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid dataset: {0}")]
    DatasetInvalid(String),
    #[error("split `{0}` has no (view, frame) pairs")]
    EmptySplit(String),
    #[error("non-finite loss at iteration {iteration}; batch written to {dump}")]
    NonFiniteLoss { iteration: usize, dump: String },
    #[error("checkpoint checksum mismatch or truncated file")]
    ChecksumError,
    #[error("checkpoint format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("not a checkpoint file: {0}")]
    BadCheckpoint(String),
    #[error("i/o failure at {path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Warp(#[from] Se3Error),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error("gradient check failed: {0}")]
    GradientCheck(String),
    #[error("plot failed: {0}")]
    Plot(String),
}

impl PipelineError {
    /// 1 for bad input, 2 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_)
            | PipelineError::DatasetInvalid(_)
            | PipelineError::EmptySplit(_)
            | PipelineError::ChecksumError
            | PipelineError::VersionMismatch { .. }
            | PipelineError::BadCheckpoint(_) => 1,
            PipelineError::Scene(
                SceneError::Invalid(_)
                | SceneError::ParseError { .. }
                | SceneError::DegenerateConfiguration(_),
            ) => 1,
            _ => 2,
        }
    }
}

pub(crate) fn io_err(path: &std::path::Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Sizes the global worker pool from `LIEFLOW_THREADS` (if set). Safe to
/// call more than once.
pub fn init_threads() {
    if let Some(n) = std::env::var("LIEFLOW_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
}
