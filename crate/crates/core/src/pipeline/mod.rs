//! Toy-scale training, inference, evaluation and analysis.

mod analysis;
mod data;
mod eval;
mod optim;
mod train;

pub use analysis::{omega_at, omega_sweep, omega_trend, saliency, saliency_fd, saliency_gradient, OmegaPoint, OmegaTrend};
pub use data::{make_eval_set, make_training_sample, EvalSample, SceneConfig, TrainingSample};
pub use eval::{
    ablation_table, evaluate, PSNR_CEILING_DB, interpolate, nearest_blurry, run_ablation_suite, EvalConfig, EvalReport, Interpolated,
    TauMetrics,
};
pub use optim::{adamw_step, cosine_lr, AdamWConfig, OptimizerState};
pub use train::{smoothed, train_toy, write_loss_curve, TrainConfig, TrainOutcome};

use thiserror::Error;

use crate::events::EventError;
use crate::frame::FrameError;
use crate::net::{Ablation, NetError};
use crate::sim::SimError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("parameter {0} has mismatched shapes across params, gradients and optimizer state")]
    ShapeMismatch(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },
    #[error("no checkpoint for variant {0}")]
    MissingCheckpoint(Ablation),
    #[error("tau {tau} lies outside the shutter period [{start}, {end}]")]
    TauOutsideShutter { tau: f64, start: f64, end: f64 },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Events(#[from] EventError),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
