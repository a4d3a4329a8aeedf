//! Batch-size planning for a fixed number of epochs.
//!
//! For every `(ε, B)` the planner calibrates σ for `T = ceil(E·N/B)` steps at
//! `q = B/N` and reports the cumulative noise `σ√T` next to the per-step
//! metrics `σ/q` and `σ/B`. The recommendation among rows with at least
//! `T_min` steps is the smallest batch whose cumulative noise is within
//! `(1 + tolerance)` of the minimum.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::accountant;
use crate::kvconfig::{join_list, ConfigError, KvConfig};

pub const DEFAULT_MIN_STEPS: u64 = 20;
pub const DEFAULT_PLATEAU_TOLERANCE: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("batch size {batch} must be in 1..={dataset}")]
    InvalidBatch { batch: usize, dataset: usize },
    #[error("invalid plan configuration: {0}")]
    InvalidConfig(String),
    #[error("no batch size reaches {min_steps} steps; raise the number of epochs or add smaller batch candidates")]
    NoFeasibleRow { min_steps: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanConfig {
    pub dataset_size: usize,
    pub epochs: u64,
    pub delta: f64,
    pub epsilon_targets: Vec<f64>,
    pub batch_candidates: Vec<usize>,
    pub min_steps: u64,
    pub plateau_tolerance: f64,
}

impl PlanConfig {
    pub fn new(
        dataset_size: usize,
        epochs: u64,
        delta: f64,
        epsilon_targets: Vec<f64>,
        batch_candidates: Vec<usize>,
    ) -> Self {
        Self {
            dataset_size,
            epochs,
            delta,
            epsilon_targets,
            batch_candidates,
            min_steps: DEFAULT_MIN_STEPS,
            plateau_tolerance: DEFAULT_PLATEAU_TOLERANCE,
        }
    }

    pub const KEYS: &'static [&'static str] = &[
        "dataset_size",
        "epochs",
        "delta",
        "epsilons",
        "batch_sizes",
        "min_steps",
        "plateau_tolerance",
    ];

    /// Unset keys fall back to a 50 000-example, 8-epoch plan over
    /// `B = 2⁸..2¹⁴` and full batch, at ε ∈ {0.25, …, 8}.
    pub fn from_kv(kv: &KvConfig) -> Result<Self, ConfigError> {
        let n: usize = kv.get_or("dataset_size", 50_000)?;
        let batches = match kv.get_list::<usize>("batch_sizes")? {
            Some(b) => b,
            None => (8..=14).map(|k| 1usize << k).filter(|&b| b <= n).chain([n]).collect(),
        };
        Ok(Self {
            dataset_size: n,
            epochs: kv.get_or("epochs", 8)?,
            delta: kv.get_or("delta", 1e-5)?,
            epsilon_targets: kv
                .get_list("epsilons")?
                .unwrap_or_else(|| vec![0.25, 0.5, 1.0, 2.0, 4.0, 8.0]),
            batch_candidates: batches,
            min_steps: kv.get_or("min_steps", DEFAULT_MIN_STEPS)?,
            plateau_tolerance: kv.get_or("plateau_tolerance", DEFAULT_PLATEAU_TOLERANCE)?,
        })
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("dataset_size", self.dataset_size);
        kv.set("epochs", self.epochs);
        kv.set("delta", self.delta);
        kv.set("epsilons", join_list(&self.epsilon_targets));
        kv.set("batch_sizes", join_list(&self.batch_candidates));
        kv.set("min_steps", self.min_steps);
        kv.set("plateau_tolerance", self.plateau_tolerance);
        kv
    }

    /// Sorts and deduplicates the candidate lists and checks ranges.
    pub fn normalized(&self) -> Result<Self, PlanError> {
        let mut c = self.clone();
        if c.dataset_size == 0 || c.epochs == 0 || c.min_steps == 0 {
            return Err(PlanError::InvalidConfig(
                "dataset_size, epochs and min_steps must be >= 1".into(),
            ));
        }
        if !(c.delta > 0.0 && c.delta < 1.0) {
            return Err(PlanError::InvalidConfig(format!("delta {} outside (0, 1)", c.delta)));
        }
        if !(c.plateau_tolerance >= 0.0) {
            return Err(PlanError::InvalidConfig("plateau_tolerance must be >= 0".into()));
        }
        if c.epsilon_targets.is_empty() || c.epsilon_targets.iter().any(|e| !(*e > 0.0)) {
            return Err(PlanError::InvalidConfig(
                "epsilon targets must be non-empty and positive".into(),
            ));
        }
        if c.batch_candidates.is_empty() {
            return Err(PlanError::InvalidConfig("batch candidates must be non-empty".into()));
        }
        for &b in &c.batch_candidates {
            if b == 0 || b > c.dataset_size {
                return Err(PlanError::InvalidBatch {
                    batch: b,
                    dataset: c.dataset_size,
                });
            }
        }
        c.batch_candidates.sort_unstable();
        c.batch_candidates.dedup();
        c.epsilon_targets.sort_by(f64::total_cmp);
        c.epsilon_targets.dedup();
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchPlanRow {
    pub epsilon: f64,
    pub batch_size: usize,
    pub sampling_rate: f64,
    pub steps: u64,
    /// `None` when calibration failed for this row.
    pub sigma: Option<f64>,
    pub cumulative_noise: Option<f64>,
    pub effective_noise_std: Option<f64>,
    pub per_step_avg_noise_std: Option<f64>,
    pub meets_min_steps: bool,
    pub recommended: bool,
    pub calibration_error: Option<String>,
}

/// `ceil(E·N/B)`.
pub fn steps_for(dataset_size: usize, epochs: u64, batch: usize) -> Result<u64, PlanError> {
    if batch == 0 || batch > dataset_size {
        return Err(PlanError::InvalidBatch {
            batch,
            dataset: dataset_size,
        });
    }
    Ok((epochs * dataset_size as u64).div_ceil(batch as u64))
}

fn build_row(cfg: &PlanConfig, epsilon: f64, batch: usize) -> BatchPlanRow {
    let n = cfg.dataset_size;
    let q = batch as f64 / n as f64;
    let steps = steps_for(n, cfg.epochs, batch).expect("validated");
    let (sigma, err) = match accountant::calibrate_sigma(epsilon, cfg.delta, q, steps) {
        Ok(s) => (Some(s), None),
        Err(e) => (None, Some(e.to_string())),
    };
    BatchPlanRow {
        epsilon,
        batch_size: batch,
        sampling_rate: q,
        steps,
        sigma,
        cumulative_noise: sigma.map(|s| s * (steps as f64).sqrt()),
        effective_noise_std: sigma.map(|s| s / q),
        per_step_avg_noise_std: sigma.map(|s| s / batch as f64),
        meets_min_steps: steps >= cfg.min_steps,
        recommended: false,
        calibration_error: err,
    }
}

/// Builds the full `(ε, B)` table, ordered by ε then B, with the recommended
/// row of each ε flagged.
pub fn plan(config: &PlanConfig) -> Result<Vec<BatchPlanRow>, PlanError> {
    let cfg = config.normalized()?;
    let pairs: Vec<(f64, usize)> = cfg
        .epsilon_targets
        .iter()
        .flat_map(|&e| cfg.batch_candidates.iter().map(move |&b| (e, b)))
        .collect();
    let mut rows: Vec<BatchPlanRow> = pairs.par_iter().map(|&(e, b)| build_row(&cfg, e, b)).collect();
    for &eps in &cfg.epsilon_targets {
        let group: Vec<&BatchPlanRow> = rows.iter().filter(|r| r.epsilon == eps).collect();
        if let Ok(b) = recommend(&group, cfg.min_steps, cfg.plateau_tolerance) {
            for r in rows.iter_mut().filter(|r| r.epsilon == eps && r.batch_size == b) {
                r.recommended = true;
            }
        }
    }
    Ok(rows)
}

/// Smallest feasible batch whose cumulative noise is within
/// `(1 + plateau_tolerance)` of the feasible minimum.
pub fn recommend<R: std::borrow::Borrow<BatchPlanRow>>(
    rows: &[R],
    min_steps: u64,
    plateau_tolerance: f64,
) -> Result<usize, PlanError> {
    let feasible: Vec<(usize, f64)> = rows
        .iter()
        .map(|r| r.borrow())
        .filter(|r| r.steps >= min_steps)
        .filter_map(|r| r.cumulative_noise.map(|c| (r.batch_size, c)))
        .collect();
    let min = feasible
        .iter()
        .map(|&(_, c)| c)
        .min_by(f64::total_cmp)
        .ok_or(PlanError::NoFeasibleRow { min_steps })?;
    let limit = (1.0 + plateau_tolerance) * min;
    Ok(feasible
        .iter()
        .filter(|&&(_, c)| c <= limit)
        .map(|&(b, _)| b)
        .min()
        .expect("the minimum itself qualifies"))
}

pub const PLAN_CSV_HEADER: &str = "epsilon,batch_size,sampling_rate,steps,sigma,cumulative_noise,effective_noise_std,per_step_avg_noise_std,meets_min_steps,recommended";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn plan_csv(rows: &[BatchPlanRow]) -> String {
    let mut s = String::from(PLAN_CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            r.epsilon,
            r.batch_size,
            r.sampling_rate,
            r.steps,
            opt(r.sigma),
            opt(r.cumulative_noise),
            opt(r.effective_noise_std),
            opt(r.per_step_avg_noise_std),
            r.meets_min_steps,
            r.recommended
        );
    }
    s
}
