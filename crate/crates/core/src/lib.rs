//! Differentially private training toolkit.
//!
//! * [`accountant`]: Rényi-DP accounting and noise calibration for the
//!   Poisson-subsampled Gaussian mechanism.
//! * [`dpcore`]: per-example clipping, sampling, noisy aggregation, SGD/Adam.
//! * [`clipopt`]: the clipping MSE objective and its exact minimizer.
//! * [`diagnostics`]: retained weights, gradient-norm summaries, accuracy.
//! * [`planner`]: fixed-epochs batch-size planning from cumulative noise.
//! * [`harness`]: synthetic tasks, the training loop and grid sweeps.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accountant;
pub mod clipopt;
pub mod diagnostics;
pub mod dpcore;
pub mod harness;
pub mod kvconfig;
pub mod planner;
pub mod seed;

pub use accountant::{account, calibrate_sigma, rdp_one_step, AccountantError, PrivacyParams, RdpCurve};
pub use clipopt::{
    grid_oracle, koloskova_bound, koloskova_c_star, mse_derivative, mse_of_c, solve_optimal_c, ClipOptError,
    ClipSolution, KoloskovaParams,
};
pub use diagnostics::{
    class_retained_weights, grad_norm_distribution, macro_accuracy, per_class_accuracy, relative_retained_weights,
    retained_weight, ClassRetainedWeight, GradNormSummary,
};
pub use dpcore::{
    clip_auto_s, clip_normalized, clip_standard, dp_update, noisy_aggregate, poisson_sample, ClipMode, DpError,
    OptimizerState, PerExampleGradients,
};
pub use kvconfig::{ConfigError, KvConfig};
pub use planner::{plan, recommend, steps_for, BatchPlanRow, PlanConfig, PlanError};
