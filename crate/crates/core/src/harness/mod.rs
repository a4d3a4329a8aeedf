//! Synthetic transfer-learning experiments: frozen random-feature backbone,
//! trainable softmax head, private training and grid sweeps.

pub mod model;
pub mod presets;
pub mod sweep;
pub mod task;
pub mod train;

use thiserror::Error;

use crate::accountant::AccountantError;
use crate::diagnostics::DiagnosticsError;
use crate::dpcore::DpError;
use crate::kvconfig::ConfigError;
use crate::planner::PlanError;

pub use model::{loss_and_grads, mean_loss, predict, HeadShape};
pub use sweep::{best_per_privacy, sweep, ConfigAggregate, SweepGrid, SweepRecord, SweepResults};
pub use task::{gen_task, nearest_centroid_error, Backbone, Dataset, SyntheticTaskConfig, Task};
pub use train::{
    train, train_run, EpochMetrics, OptimizerKind, Privacy, RunMetrics, RunStatus, TrainConfig, TrainedRun,
    DEFAULT_DELTA,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("invalid training configuration: {0}")]
    InvalidTrain(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Accountant(#[from] AccountantError),
    #[error(transparent)]
    Dp(#[from] DpError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),
}
