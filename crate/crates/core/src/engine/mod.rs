//! Deterministic miniature training engine.

mod model;
mod objective;
mod record;
mod train;

pub use model::{Activation, Architecture, HiddenLayer, Network, MAX_DEPTH};
pub use objective::{full_gradient, full_gradient_norm, Objective, Supervised};
pub use record::{Evaluation, IterationSample, RunMeta, RunRecord};
pub use train::{train_budgeted, train_objective, EvalCadence, Observer, TrainConfig, DIVERGENCE_LOSS};

use thiserror::Error;

use crate::optim::OptimError;
use crate::schedules::ScheduleError;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("expected {expected} weights, got {got}")]
    WeightMismatch { expected: usize, got: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite loss or activations")]
    NonFinite,
    #[error("budget must be at least one iteration")]
    ZeroBudget,
    #[error("batch size must be at least one")]
    ZeroBatch,
    #[error("schedule `{0}` is not budget-aware; convert it first")]
    UnawareSchedule(String),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}
