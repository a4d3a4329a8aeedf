//! Pinned synthetic scenarios: a hard imbalanced task with a weak backbone,
//! an easy balanced one with a perfect backbone, and the experiments that
//! compare privacy levels on them.

use super::sweep::{best_per_privacy, sweep, SweepGrid};
use super::task::{gen_task, SyntheticTaskConfig};
use super::train::{train, OptimizerKind, Privacy, TrainConfig, DEFAULT_DELTA};
use super::HarnessError;
use crate::dpcore::ClipMode;
use crate::seed::derive_seed;

pub const HARD_CLASS_WEIGHTS: [f64; 5] = [0.4, 0.25, 0.15, 0.12, 0.08];
pub const HARD_SEPARATION: f64 = 3.0;
pub const HARD_QUALITY: f64 = 0.3;
pub const HARD_FEATURE_SCALE: f64 = 10.0;
pub const EASY_SEPARATION: f64 = 4.0;

pub const LOW_EPSILON: f64 = 0.5;
pub const HIGH_EPSILON: f64 = 8.0;
pub const SHIFT_CLIP_BOUNDS: [f64; 3] = [0.1, 1.0, 10.0];
pub const SHIFT_ETAS: [f64; 5] = [0.0003, 0.001, 0.003, 0.01, 0.03];
pub const SHIFT_BATCH: usize = 256;
pub const SHIFT_EPOCHS: u64 = 8;

/// Five classes, prior skewed 5:1, quality 0.3, features amplified tenfold.
pub fn hard_task_config(seed: u64) -> SyntheticTaskConfig {
    SyntheticTaskConfig {
        class_weights: HARD_CLASS_WEIGHTS.to_vec(),
        feature_scale: HARD_FEATURE_SCALE,
        ..SyntheticTaskConfig::balanced(5, HARD_SEPARATION, HARD_QUALITY, seed)
    }
}

/// Five balanced, well separated classes, noiseless backbone.
pub fn easy_task_config(seed: u64) -> SyntheticTaskConfig {
    SyntheticTaskConfig::balanced(5, EASY_SEPARATION, 1.0, seed)
}

/// The fixed training configuration used by both experiments.
pub fn reference_config(epsilon: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        eta: 0.003,
        batch_size: SHIFT_BATCH,
        clip_mode: ClipMode::Normalized { bound: 1.0 },
        epochs: SHIFT_EPOCHS,
        privacy: Privacy::Target {
            epsilon,
            delta: DEFAULT_DELTA,
        },
        optimizer: OptimizerKind::Adam,
        seed,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormShift {
    pub median_low_eps: f64,
    pub median_high_eps: f64,
}

impl NormShift {
    pub fn holds(&self) -> bool {
        self.median_low_eps > self.median_high_eps
    }
}

/// Median end-of-training gradient norm on the hard task at the two privacy
/// levels, same task and run seed.
pub fn norm_shift(seed: u64) -> Result<NormShift, HarnessError> {
    let task = gen_task(&hard_task_config(seed))?;
    let run_seed = derive_seed(seed, &[0x6E]);
    let median = |eps| -> Result<f64, HarnessError> {
        let m = train(&task, &reference_config(eps, run_seed))?;
        m.final_median_grad_norm()
            .filter(|_| m.is_completed())
            .ok_or_else(|| HarnessError::InvalidTrain(format!("reference run at eps={eps} did not complete")))
    };
    Ok(NormShift {
        median_low_eps: median(LOW_EPSILON)?,
        median_high_eps: median(HIGH_EPSILON)?,
    })
}

pub fn clip_shift_grid(master_seed: u64, repeats: usize) -> SweepGrid {
    SweepGrid {
        etas: SHIFT_ETAS.to_vec(),
        batch_sizes: vec![SHIFT_BATCH],
        clip_modes: SHIFT_CLIP_BOUNDS
            .iter()
            .map(|&bound| ClipMode::Normalized { bound })
            .collect(),
        privacies: [LOW_EPSILON, HIGH_EPSILON]
            .iter()
            .map(|&epsilon| Privacy::Target {
                epsilon,
                delta: DEFAULT_DELTA,
            })
            .collect(),
        epochs: SHIFT_EPOCHS,
        optimizer: OptimizerKind::Adam,
        repeats,
        master_seed,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipShift {
    pub best_c_low_eps: f64,
    pub best_c_high_eps: f64,
    pub accuracy_low_eps: f64,
    pub accuracy_high_eps: f64,
}

impl ClipShift {
    pub fn holds(&self) -> bool {
        self.best_c_low_eps >= self.best_c_high_eps
    }
}

/// Best clip bound per privacy level from a full η × C sweep on the hard task.
pub fn clip_shift(seed: u64, repeats: usize) -> Result<ClipShift, HarnessError> {
    let task = gen_task(&hard_task_config(seed))?;
    let res = sweep(&task, &clip_shift_grid(seed, repeats))?;
    let best = best_per_privacy(&res);
    let pick = |eps: f64| {
        best.iter()
            .find(|(p, _)| p.target_epsilon() == Some(eps))
            .and_then(|(_, a)| Some((a.config.clip_mode.bound()?, a.mean_accuracy?)))
            .ok_or_else(|| HarnessError::InvalidTrain(format!("no completed run at eps={eps}")))
    };
    let (c_lo, acc_lo) = pick(LOW_EPSILON)?;
    let (c_hi, acc_hi) = pick(HIGH_EPSILON)?;
    Ok(ClipShift {
        best_c_low_eps: c_lo,
        best_c_high_eps: c_hi,
        accuracy_low_eps: acc_lo,
        accuracy_high_eps: acc_hi,
    })
}
