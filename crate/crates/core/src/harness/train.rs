//! The private training loop: Poisson-sampled minibatches, per-example
//! clipping, Gaussian noise, SGD or Adam on a zero-initialized head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{loss_and_grads, mean_loss, predict, HeadShape};
use super::task::Task;
use super::HarnessError;
use crate::accountant;
use crate::diagnostics::{grad_norm_distribution, per_class_accuracy, ClassAccuracy, GradNormSummary};
use crate::dpcore::{dp_update, poisson_sample, ClipMode, OptimizerState, PerExampleGradients};
use crate::kvconfig::{ConfigError, KvConfig};
use crate::planner::steps_for;

/// Runs abort once the minibatch loss exceeds this.
pub const DIVERGENCE_LOSS: f64 = 1e6;
pub const DEFAULT_DELTA: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Privacy {
    /// Calibrate σ to reach `epsilon` at `delta`.
    Target { epsilon: f64, delta: f64 },
    /// Use the given noise multiplier; ε is reported, not targeted.
    Noise { sigma: f64, delta: f64 },
}

impl Privacy {
    pub fn delta(&self) -> f64 {
        match *self {
            Privacy::Target { delta, .. } | Privacy::Noise { delta, .. } => delta,
        }
    }

    pub fn target_epsilon(&self) -> Option<f64> {
        match *self {
            Privacy::Target { epsilon, .. } => Some(epsilon),
            Privacy::Noise { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub eta: f64,
    /// Expected batch size; the sampling rate is `batch_size / N`.
    pub batch_size: usize,
    pub clip_mode: ClipMode,
    pub epochs: u64,
    pub privacy: Privacy,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "eta",
        "batch_size",
        "clip_mode",
        "clip_bound",
        "auto_s_gamma",
        "epochs",
        "epsilon",
        "sigma",
        "delta",
        "optimizer",
        "seed",
    ];

    pub fn validate(&self, dataset_size: usize) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::InvalidTrain(m));
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return bad(format!("eta {} must be positive", self.eta));
        }
        if self.batch_size == 0 || self.batch_size > dataset_size {
            return bad(format!("batch_size {} must be in 1..={dataset_size}", self.batch_size));
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        self.clip_mode.validate()?;
        let delta = self.privacy.delta();
        if !(delta > 0.0 && delta < 1.0) {
            return bad(format!("delta {delta} outside (0, 1)"));
        }
        match self.privacy {
            Privacy::Target { epsilon, .. } if !(epsilon > 0.0) => bad(format!("epsilon {epsilon} must be > 0")),
            Privacy::Noise { sigma, .. } if !(sigma >= 0.0) || !sigma.is_finite() => {
                bad(format!("sigma {sigma} must be finite and >= 0"))
            }
            _ => Ok(()),
        }
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self, ConfigError> {
        let mode = kv.raw("clip_mode").unwrap_or("normalized");
        let bound: f64 = kv.get_or("clip_bound", 1.0)?;
        let clip_mode = match mode {
            "standard" => ClipMode::Standard { bound },
            "normalized" => ClipMode::Normalized { bound },
            "auto_s" => ClipMode::AutoS {
                gamma: kv.get_or("auto_s_gamma", ClipMode::AUTO_S_DEFAULT_GAMMA)?,
            },
            other => {
                return Err(ConfigError::Invalid {
                    key: "clip_mode".into(),
                    value: other.into(),
                })
            }
        };
        let delta = kv.get_or("delta", DEFAULT_DELTA)?;
        let privacy = match (kv.get::<f64>("epsilon")?, kv.get::<f64>("sigma")?) {
            (Some(epsilon), None) => Privacy::Target { epsilon, delta },
            (None, Some(sigma)) => Privacy::Noise { sigma, delta },
            _ => {
                return Err(ConfigError::Constraint(
                    "exactly one of `epsilon` and `sigma` must be set".into(),
                ))
            }
        };
        let optimizer = match kv.raw("optimizer").unwrap_or("adam") {
            "sgd" => OptimizerKind::Sgd,
            "adam" => OptimizerKind::Adam,
            other => {
                return Err(ConfigError::Invalid {
                    key: "optimizer".into(),
                    value: other.into(),
                })
            }
        };
        Ok(Self {
            eta: kv.require("eta")?,
            batch_size: kv.require("batch_size")?,
            clip_mode,
            epochs: kv.get_or("epochs", 8)?,
            privacy,
            optimizer,
            seed: kv.get_or("seed", 0)?,
        })
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("eta", self.eta);
        kv.set("batch_size", self.batch_size);
        match self.clip_mode {
            ClipMode::Standard { bound } => {
                kv.set("clip_mode", "standard");
                kv.set("clip_bound", bound);
            }
            ClipMode::Normalized { bound } => {
                kv.set("clip_mode", "normalized");
                kv.set("clip_bound", bound);
            }
            ClipMode::AutoS { gamma } => {
                kv.set("clip_mode", "auto_s");
                kv.set("auto_s_gamma", gamma);
            }
        }
        kv.set("epochs", self.epochs);
        match self.privacy {
            Privacy::Target { epsilon, delta } => {
                kv.set("epsilon", epsilon);
                kv.set("delta", delta);
            }
            Privacy::Noise { sigma, delta } => {
                kv.set("sigma", sigma);
                kv.set("delta", delta);
            }
        }
        kv.set(
            "optimizer",
            match self.optimizer {
                OptimizerKind::Sgd => "sgd",
                OptimizerKind::Adam => "adam",
            },
        );
        kv.set("seed", self.seed);
        kv
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: u64,
    pub steps_done: u64,
    pub train_loss: f64,
    pub test_macro_accuracy: f64,
    pub per_class_accuracy: Vec<ClassAccuracy>,
    /// Per-example gradient norms over the training set, all head parameters.
    pub grad_norms: GradNormSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Diverged { step: u64, loss: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub status: RunStatus,
    pub sigma: f64,
    pub sampling_rate: f64,
    pub total_steps: u64,
    pub target_epsilon: Option<f64>,
    /// `None` when the run is not private (σ = 0).
    pub realized_epsilon: Option<f64>,
    pub delta: f64,
    pub epochs: Vec<EpochMetrics>,
}

impl RunMetrics {
    pub fn is_completed(&self) -> bool {
        self.status == RunStatus::Completed
    }

    pub fn last(&self) -> Option<&EpochMetrics> {
        self.epochs.last()
    }

    pub fn final_macro_accuracy(&self) -> Option<f64> {
        self.last().map(|e| e.test_macro_accuracy)
    }

    pub fn final_median_grad_norm(&self) -> Option<f64> {
        self.last().map(|e| e.grad_norms.median())
    }
}

/// A finished run and the head it produced.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedRun {
    pub metrics: RunMetrics,
    pub params: Vec<f64>,
}

impl TrainedRun {
    /// Per-example training-set gradients of the final head.
    pub fn final_gradients(&self, task: &Task) -> Result<PerExampleGradients, HarnessError> {
        Ok(loss_and_grads(&self.params, &task.train)?.1)
    }
}

/// Noise multiplier for a configuration on a dataset of `dataset_size`.
pub fn resolve_sigma(config: &TrainConfig, dataset_size: usize) -> Result<(f64, f64, u64), HarnessError> {
    let q = config.batch_size as f64 / dataset_size as f64;
    let steps = steps_for(dataset_size, config.epochs, config.batch_size)?;
    let sigma = match config.privacy {
        Privacy::Target { epsilon, delta } => accountant::calibrate_sigma(epsilon, delta, q, steps)?,
        Privacy::Noise { sigma, .. } => sigma,
    };
    Ok((sigma, q, steps))
}

fn epoch_metrics(task: &Task, params: &[f64], epoch: u64, steps_done: u64) -> Result<EpochMetrics, HarnessError> {
    let (_, grads) = loss_and_grads(params, &task.train)?;
    let acc = per_class_accuracy(&predict(params, &task.test), &task.test.labels, task.test.num_classes)?;
    Ok(EpochMetrics {
        epoch,
        steps_done,
        train_loss: mean_loss(params, &task.train),
        test_macro_accuracy: acc.macro_accuracy,
        per_class_accuracy: acc.per_class,
        grad_norms: grad_norm_distribution(&grads)?,
    })
}

pub fn train(task: &Task, config: &TrainConfig) -> Result<RunMetrics, HarnessError> {
    train_run(task, config).map(|r| r.metrics)
}

/// Trains and keeps the final head parameters.
pub fn train_run(task: &Task, config: &TrainConfig) -> Result<TrainedRun, HarnessError> {
    let n = task.train.len();
    config.validate(n)?;
    let (sigma, q, total_steps) = resolve_sigma(config, n)?;
    let delta = config.privacy.delta();
    let realized_epsilon = if sigma > 0.0 {
        Some(accountant::account(sigma, q, total_steps, delta)?)
    } else {
        None
    };

    let shape = HeadShape::of(&task.train);
    let mut params = shape.zeros();
    let mut state = match config.optimizer {
        OptimizerKind::Sgd => OptimizerState::Sgd,
        OptimizerKind::Adam => OptimizerState::adam(params.len()),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let denom = q * n as f64;

    let mut epochs = Vec::with_capacity(config.epochs as usize);
    let mut status = RunStatus::Completed;
    let mut step = 0u64;
    'outer: for e in 1..=config.epochs {
        let epoch_end = (e * total_steps).div_ceil(config.epochs);
        while step < epoch_end {
            let idx = poisson_sample(n, q, &mut rng);
            let batch = task.train.subset(&idx);
            let (loss, grads) = match loss_and_grads(&params, &batch) {
                Ok(v) => v,
                Err(_) => {
                    status = RunStatus::Diverged { step, loss: f64::NAN };
                    break 'outer;
                }
            };
            if !loss.is_finite() || loss > DIVERGENCE_LOSS {
                status = RunStatus::Diverged { step, loss };
                break 'outer;
            }
            dp_update(
                &mut params,
                &grads,
                config.clip_mode,
                sigma,
                config.eta,
                denom,
                &mut state,
                &mut rng,
            )?;
            step += 1;
        }
        if params.iter().any(|v| !v.is_finite()) {
            status = RunStatus::Diverged { step, loss: f64::NAN };
            break;
        }
        match epoch_metrics(task, &params, e, step) {
            Ok(m) if m.train_loss.is_finite() && m.train_loss <= DIVERGENCE_LOSS => epochs.push(m),
            Ok(m) => {
                status = RunStatus::Diverged {
                    step,
                    loss: m.train_loss,
                };
                break;
            }
            Err(_) => {
                status = RunStatus::Diverged { step, loss: f64::NAN };
                break;
            }
        }
    }

    Ok(TrainedRun {
        metrics: RunMetrics {
            status,
            sigma,
            sampling_rate: q,
            total_steps,
            target_epsilon: config.privacy.target_epsilon(),
            realized_epsilon,
            delta,
            epochs,
        },
        params,
    })
}
