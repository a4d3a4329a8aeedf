//! Grid sweeps over learning rate, batch size, clipping and privacy level.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::task::Task;
use super::train::{train, OptimizerKind, Privacy, RunMetrics, RunStatus, TrainConfig, DEFAULT_DELTA};
use super::HarnessError;
use crate::dpcore::ClipMode;
use crate::kvconfig::{join_list, ConfigError, KvConfig};
use crate::seed::derive_seed;

pub const DEFAULT_REPEATS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub etas: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    pub clip_modes: Vec<ClipMode>,
    pub privacies: Vec<Privacy>,
    pub epochs: u64,
    pub optimizer: OptimizerKind,
    pub repeats: usize,
    pub master_seed: u64,
}

impl SweepGrid {
    pub const KEYS: &'static [&'static str] = &[
        "etas",
        "batch_sizes",
        "clip_mode",
        "clip_bounds",
        "auto_s_gamma",
        "epsilons",
        "sigmas",
        "delta",
        "epochs",
        "optimizer",
        "repeats",
        "seed",
    ];

    /// `clip_bounds` expands into one mode per bound; `auto_s` takes a single
    /// `auto_s_gamma` instead. Exactly one of `epsilons` and `sigmas`.
    pub fn from_kv(kv: &KvConfig) -> Result<Self, ConfigError> {
        let bounds = kv
            .get_list::<f64>("clip_bounds")?
            .unwrap_or_else(|| vec![0.1, 1.0, 10.0]);
        let clip_modes = match kv.raw("clip_mode").unwrap_or("normalized") {
            "standard" => bounds.iter().map(|&bound| ClipMode::Standard { bound }).collect(),
            "normalized" => bounds.iter().map(|&bound| ClipMode::Normalized { bound }).collect(),
            "auto_s" => vec![ClipMode::AutoS {
                gamma: kv.get_or("auto_s_gamma", ClipMode::AUTO_S_DEFAULT_GAMMA)?,
            }],
            other => {
                return Err(ConfigError::Invalid {
                    key: "clip_mode".into(),
                    value: other.into(),
                })
            }
        };
        let delta = kv.get_or("delta", DEFAULT_DELTA)?;
        let privacies = match (kv.get_list::<f64>("epsilons")?, kv.get_list::<f64>("sigmas")?) {
            (Some(e), None) => e
                .into_iter()
                .map(|epsilon| Privacy::Target { epsilon, delta })
                .collect(),
            (None, Some(s)) => s.into_iter().map(|sigma| Privacy::Noise { sigma, delta }).collect(),
            _ => {
                return Err(ConfigError::Constraint(
                    "exactly one of `epsilons` and `sigmas` must be set".into(),
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
            etas: kv
                .get_list("etas")?
                .ok_or_else(|| ConfigError::Missing("etas".into()))?,
            batch_sizes: kv
                .get_list("batch_sizes")?
                .ok_or_else(|| ConfigError::Missing("batch_sizes".into()))?,
            clip_modes,
            privacies,
            epochs: kv.get_or("epochs", 8)?,
            optimizer,
            repeats: kv.get_or("repeats", DEFAULT_REPEATS)?,
            master_seed: kv.get_or("seed", 0)?,
        })
    }

    /// Inverse of [`SweepGrid::from_kv`] for grids it can express: a single
    /// clip family and a single δ.
    pub fn to_kv(&self) -> Result<KvConfig, ConfigError> {
        let mut kv = KvConfig::new();
        kv.set("etas", join_list(&self.etas));
        kv.set("batch_sizes", join_list(&self.batch_sizes));
        let mut bounds = Vec::new();
        let mut family = None;
        for m in &self.clip_modes {
            let (name, b) = match *m {
                ClipMode::Standard { bound } => ("standard", Some(bound)),
                ClipMode::Normalized { bound } => ("normalized", Some(bound)),
                ClipMode::AutoS { gamma } => {
                    kv.set("auto_s_gamma", gamma);
                    ("auto_s", None)
                }
            };
            if family.is_some_and(|f| f != name) || (name == "auto_s" && self.clip_modes.len() > 1) {
                return Err(ConfigError::Constraint(
                    "a sweep file holds one clip mode family".into(),
                ));
            }
            family = Some(name);
            bounds.extend(b);
        }
        if let Some(f) = family {
            kv.set("clip_mode", f);
        }
        if !bounds.is_empty() {
            kv.set("clip_bounds", join_list(&bounds));
        }
        let deltas: Vec<f64> = self.privacies.iter().map(Privacy::delta).collect();
        if deltas.windows(2).any(|w| w[0] != w[1]) {
            return Err(ConfigError::Constraint("a sweep file holds one delta".into()));
        }
        if let Some(d) = deltas.first() {
            kv.set("delta", d);
        }
        let eps: Vec<f64> = self.privacies.iter().filter_map(Privacy::target_epsilon).collect();
        let sigmas: Vec<f64> = self
            .privacies
            .iter()
            .filter_map(|p| match *p {
                Privacy::Noise { sigma, .. } => Some(sigma),
                Privacy::Target { .. } => None,
            })
            .collect();
        match (eps.is_empty(), sigmas.is_empty()) {
            (false, true) => kv.set("epsilons", join_list(&eps)),
            (true, false) => kv.set("sigmas", join_list(&sigmas)),
            (true, true) => {}
            (false, false) => {
                return Err(ConfigError::Constraint(
                    "a sweep file holds epsilons or sigmas, not both".into(),
                ))
            }
        }
        kv.set("epochs", self.epochs);
        kv.set(
            "optimizer",
            match self.optimizer {
                OptimizerKind::Sgd => "sgd",
                OptimizerKind::Adam => "adam",
            },
        );
        kv.set("repeats", self.repeats);
        kv.set("seed", self.master_seed);
        Ok(kv)
    }

    /// Every configuration, `η` varying fastest and privacy slowest.
    pub fn configs(&self) -> Vec<TrainConfig> {
        let mut out = Vec::new();
        for &privacy in &self.privacies {
            for &clip_mode in &self.clip_modes {
                for &batch_size in &self.batch_sizes {
                    for &eta in &self.etas {
                        out.push(TrainConfig {
                            eta,
                            batch_size,
                            clip_mode,
                            epochs: self.epochs,
                            privacy,
                            optimizer: self.optimizer,
                            seed: 0,
                        });
                    }
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.etas.is_empty()
            || self.batch_sizes.is_empty()
            || self.clip_modes.is_empty()
            || self.privacies.is_empty()
            || self.repeats == 0
        {
            return Err(HarnessError::InvalidTrain(
                "sweep grids and repeats must be non-empty".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub config_index: usize,
    pub repeat: usize,
    pub config: TrainConfig,
    /// `Err` holds the failure message of a run that could not start.
    pub outcome: Result<RunMetrics, String>,
}

impl SweepRecord {
    /// Final macro accuracy of a completed run.
    pub fn accuracy(&self) -> Option<f64> {
        match &self.outcome {
            Ok(m) if m.is_completed() => m.final_macro_accuracy(),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigAggregate {
    pub config_index: usize,
    pub config: TrainConfig,
    pub runs: usize,
    pub failures: usize,
    pub mean_accuracy: Option<f64>,
    pub min_accuracy: Option<f64>,
    pub max_accuracy: Option<f64>,
    pub mean_median_grad_norm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResults {
    pub records: Vec<SweepRecord>,
    pub aggregates: Vec<ConfigAggregate>,
}

/// Every configuration × repeat; runs execute in parallel, results come back
/// in `(config, repeat)` order and do not depend on scheduling.
pub fn sweep(task: &Task, grid: &SweepGrid) -> Result<SweepResults, HarnessError> {
    grid.validate()?;
    let configs = grid.configs();
    let jobs: Vec<(usize, usize)> = (0..configs.len())
        .flat_map(|c| (0..grid.repeats).map(move |r| (c, r)))
        .collect();
    let records: Vec<SweepRecord> = jobs
        .par_iter()
        .map(|&(ci, rep)| {
            let config = TrainConfig {
                seed: derive_seed(grid.master_seed, &[ci as u64, rep as u64]),
                ..configs[ci].clone()
            };
            let outcome = train(task, &config).map_err(|e| e.to_string());
            SweepRecord {
                config_index: ci,
                repeat: rep,
                config,
                outcome,
            }
        })
        .collect();
    let aggregates = aggregate(&configs, &records);
    Ok(SweepResults { records, aggregates })
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn aggregate(configs: &[TrainConfig], records: &[SweepRecord]) -> Vec<ConfigAggregate> {
    configs
        .iter()
        .enumerate()
        .map(|(ci, cfg)| {
            let mine: Vec<&SweepRecord> = records.iter().filter(|r| r.config_index == ci).collect();
            let accs: Vec<f64> = mine.iter().filter_map(|r| r.accuracy()).collect();
            let norms: Vec<f64> = mine
                .iter()
                .filter(|r| r.accuracy().is_some())
                .filter_map(|r| r.outcome.as_ref().ok().and_then(|m| m.final_median_grad_norm()))
                .collect();
            ConfigAggregate {
                config_index: ci,
                config: TrainConfig { seed: 0, ..cfg.clone() },
                runs: mine.len(),
                failures: mine.len() - accs.len(),
                mean_accuracy: mean(&accs),
                min_accuracy: accs.iter().copied().min_by(f64::total_cmp),
                max_accuracy: accs.iter().copied().max_by(f64::total_cmp),
                mean_median_grad_norm: mean(&norms),
            }
        })
        .collect()
}

fn clip_key(mode: &ClipMode) -> f64 {
    // AUTO-S behaves like a vanishing bound.
    mode.bound().unwrap_or(0.0)
}

/// Best configuration per privacy level by mean accuracy; ties go to the
/// smaller clip bound, then the smaller batch, then the smaller η.
pub fn best_per_privacy(results: &SweepResults) -> Vec<(Privacy, ConfigAggregate)> {
    let mut out: Vec<(Privacy, ConfigAggregate)> = Vec::new();
    for agg in &results.aggregates {
        let Some(acc) = agg.mean_accuracy else { continue };
        let p = agg.config.privacy;
        match out.iter_mut().find(|(q, _)| *q == p) {
            None => out.push((p, agg.clone())),
            Some((_, best)) => {
                let b = best.mean_accuracy.unwrap();
                let better = acc > b
                    || (acc == b
                        && (clip_key(&agg.config.clip_mode), agg.config.batch_size, agg.config.eta)
                            < (
                                clip_key(&best.config.clip_mode),
                                best.config.batch_size,
                                best.config.eta,
                            ));
                if better {
                    *best = agg.clone();
                }
            }
        }
    }
    out
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn mode_fields(mode: &ClipMode) -> (&'static str, f64) {
    match *mode {
        ClipMode::Standard { bound } => ("standard", bound),
        ClipMode::Normalized { bound } => ("normalized", bound),
        ClipMode::AutoS { gamma } => ("auto_s", gamma),
    }
}

fn privacy_fields(p: &Privacy) -> (Option<f64>, Option<f64>, f64) {
    match *p {
        Privacy::Target { epsilon, delta } => (Some(epsilon), None, delta),
        Privacy::Noise { sigma, delta } => (None, Some(sigma), delta),
    }
}

pub const RECORD_CSV_HEADER: &str = "config_index,repeat,seed,eta,batch_size,clip_mode,clip_param,target_epsilon,delta,sigma,steps,realized_epsilon,status,final_train_loss,final_macro_accuracy,final_median_grad_norm";

pub fn records_csv(records: &[SweepRecord]) -> String {
    let mut s = String::from(RECORD_CSV_HEADER);
    s.push('\n');
    for r in records {
        let (mode, param) = mode_fields(&r.config.clip_mode);
        let (eps, _, delta) = privacy_fields(&r.config.privacy);
        let (sigma, steps, realized, status, loss, acc, med) = match &r.outcome {
            Ok(m) => (
                Some(m.sigma),
                m.total_steps.to_string(),
                m.realized_epsilon,
                match m.status {
                    RunStatus::Completed => "completed",
                    RunStatus::Diverged { .. } => "diverged",
                },
                m.last().map(|e| e.train_loss),
                m.final_macro_accuracy(),
                m.final_median_grad_norm(),
            ),
            Err(_) => (None, String::new(), None, "failed", None, None, None),
        };
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.config_index,
            r.repeat,
            r.config.seed,
            r.config.eta,
            r.config.batch_size,
            mode,
            param,
            opt(eps),
            delta,
            opt(sigma),
            steps,
            opt(realized),
            status,
            opt(loss),
            opt(acc),
            opt(med)
        );
    }
    s
}

pub const AGGREGATE_CSV_HEADER: &str = "config_index,eta,batch_size,clip_mode,clip_param,target_epsilon,delta,runs,failures,mean_accuracy,min_accuracy,max_accuracy,mean_median_grad_norm";

pub fn aggregates_csv(aggs: &[ConfigAggregate]) -> String {
    let mut s = String::from(AGGREGATE_CSV_HEADER);
    s.push('\n');
    for a in aggs {
        let (mode, param) = mode_fields(&a.config.clip_mode);
        let (eps, _, delta) = privacy_fields(&a.config.privacy);
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            a.config_index,
            a.config.eta,
            a.config.batch_size,
            mode,
            param,
            opt(eps),
            delta,
            a.runs,
            a.failures,
            opt(a.mean_accuracy),
            opt(a.min_accuracy),
            opt(a.max_accuracy),
            opt(a.mean_median_grad_norm)
        );
    }
    s
}

/// One JSON object per record.
pub fn records_ndjson(records: &[SweepRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("records serialize"));
        s.push('\n');
    }
    s
}
