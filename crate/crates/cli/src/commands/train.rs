use std::fmt::Write as _;

use dpclip_core::harness::{gen_task, train_run, RunMetrics, RunStatus, SyntheticTaskConfig, TrainConfig};
use dpclip_core::KvConfig;
use serde::{Deserialize, Serialize};

use crate::cli::CommonArgs;
use crate::context::{ndjson, with_seed, Context};
use crate::error::CliError;
use crate::gradfile;

pub const METRICS: &str = "metrics.json";
pub const GRADIENTS: &str = "gradients.txt";
pub const LABELS: &str = "labels.txt";
pub const CHECKPOINT: &str = "checkpoint.json";

#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub task: SyntheticTaskConfig,
    pub train: TrainConfig,
    pub params: Vec<f64>,
}

pub fn keys() -> Vec<&'static str> {
    let mut k = TrainConfig::KEYS.to_vec();
    k.extend_from_slice(SyntheticTaskConfig::KEYS);
    with_seed(&k)
}

pub fn epochs_csv(m: &RunMetrics) -> String {
    let mut s = String::from(
        "epoch,steps_done,train_loss,test_macro_accuracy,norm_q05,norm_q25,norm_median,norm_q75,norm_q95\n",
    );
    for e in &m.epochs {
        let q: Vec<String> = e.grad_norms.quantiles.iter().map(|(_, v)| v.to_string()).collect();
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            e.epoch,
            e.steps_done,
            e.train_loss,
            e.test_macro_accuracy,
            q.join(",")
        );
    }
    s
}

pub fn run(common: &CommonArgs) -> Result<(), CliError> {
    let ctx = Context::resolve(common, "train", &keys(), KvConfig::new())?;
    let task_cfg = SyntheticTaskConfig::from_kv(&ctx.config)?;
    let cfg = TrainConfig::from_kv(&ctx.config)?;
    let mut resolved = task_cfg.to_kv();
    resolved.merge(&cfg.to_kv());
    ctx.write_manifest(&resolved)?;

    let task = gen_task(&task_cfg)?;
    log::info!(
        "training on {} examples, {} classes",
        task.train.len(),
        task.train.num_classes
    );
    let run = train_run(&task, &cfg)?;
    let m = &run.metrics;

    ctx.write(METRICS, &format!("{}\n", serde_json::to_string_pretty(m)?))?;
    if ctx.format.csv() {
        ctx.write("epochs.csv", &epochs_csv(m))?;
    }
    if ctx.format.ndjson() {
        ctx.write("epochs.ndjson", &ndjson(&m.epochs)?)?;
    }
    let checkpoint = Checkpoint {
        task: task_cfg,
        train: cfg,
        params: run.params.clone(),
    };
    ctx.write(CHECKPOINT, &format!("{}\n", serde_json::to_string(&checkpoint)?))?;
    if let Ok(grads) = run.final_gradients(&task) {
        ctx.write(GRADIENTS, &gradfile::render(&grads))?;
        let labels: String = task.train.labels.iter().map(|y| format!("{y}\n")).collect();
        ctx.write(LABELS, &labels)?;
    }

    let opt = |v: Option<f64>| v.map_or_else(|| "none".to_string(), |x| x.to_string());
    let status = match m.status {
        RunStatus::Completed => "completed".to_string(),
        RunStatus::Diverged { step, .. } => format!("diverged@{step}"),
    };
    println!(
        "status={status} sigma={} sampling_rate={} steps={} realized_epsilon={} final_macro_accuracy={} final_median_grad_norm={}",
        m.sigma,
        m.sampling_rate,
        m.total_steps,
        opt(m.realized_epsilon),
        opt(m.final_macro_accuracy()),
        opt(m.final_median_grad_norm())
    );
    match m.status {
        RunStatus::Completed => Ok(()),
        RunStatus::Diverged { step, loss } => {
            Err(CliError::Numeric(format!("run diverged at step {step} (loss {loss})")))
        }
    }
}
