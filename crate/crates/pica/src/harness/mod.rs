//! Training, evaluation, ablation, and benchmark drivers shared by the CLI
//! and the integration tests.

pub mod ablate;
pub mod bench;
pub mod eval;
pub mod gradsuite;
pub mod render;
pub mod train;

pub use ablate::{ablate, AblateConfig, AblationReport, VariantRow};
pub use bench::{bench, BenchConfig, BenchReport, BenchRow};
pub use eval::{evaluate, render_view, EvalReport, GroupRow, RenderedView, Split};
pub use render::{render_to, CameraChoice, RenderOutput, RenderRequest};
pub use train::{train, train_with, LossRecord, TrainConfig, Trainer, TrainSummary};

use crate::checkpoint::CheckpointError;
use crate::diff::DiffError;
use crate::model::RenderError;
use crate::scenegen::SceneError;

/// One error type across all drivers, so they can call each other freely.
#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("scene: {0}")]
    Scene(#[from] SceneError),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
    #[error("non-finite loss or gradient at iteration {iter}")]
    NonFinite { iter: usize },
    #[error("config: {0}")]
    Config(String),
}
