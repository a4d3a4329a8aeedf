use std::fmt::Write as _;

use dpclip_core::harness::sweep::{aggregates_csv, records_csv, records_ndjson};
use dpclip_core::harness::{best_per_privacy, gen_task, sweep, Privacy, SweepGrid, SyntheticTaskConfig};
use dpclip_core::KvConfig;

use crate::cli::CommonArgs;
use crate::context::{ndjson, with_seed, Context};
use crate::error::CliError;

fn keys() -> Vec<&'static str> {
    let mut k = SweepGrid::KEYS.to_vec();
    k.extend_from_slice(SyntheticTaskConfig::KEYS);
    with_seed(&k)
}

pub fn run(common: &CommonArgs) -> Result<(), CliError> {
    let ctx = Context::resolve(common, "sweep", &keys(), KvConfig::new())?;
    let task_cfg = SyntheticTaskConfig::from_kv(&ctx.config)?;
    let grid = SweepGrid::from_kv(&ctx.config)?;
    grid.validate()?;
    let mut resolved = task_cfg.to_kv();
    resolved.merge(&grid.to_kv()?);
    ctx.write_manifest(&resolved)?;

    let task = gen_task(&task_cfg)?;
    log::info!(
        "sweeping {} configurations x {} repeats",
        grid.configs().len(),
        grid.repeats
    );
    let res = sweep(&task, &grid)?;
    if ctx.format.csv() {
        ctx.write("records.csv", &records_csv(&res.records))?;
        ctx.write("aggregates.csv", &aggregates_csv(&res.aggregates))?;
    }
    if ctx.format.ndjson() {
        ctx.write("records.ndjson", &records_ndjson(&res.records))?;
        ctx.write("aggregates.ndjson", &ndjson(&res.aggregates)?)?;
    }

    let mut best = String::new();
    for (p, a) in best_per_privacy(&res) {
        let level = match p {
            Privacy::Target { epsilon, .. } => format!("epsilon={epsilon}"),
            Privacy::Noise { sigma, .. } => format!("sigma={sigma}"),
        };
        let (mode, param) = match a.config.clip_mode {
            dpclip_core::ClipMode::Standard { bound } => ("standard", bound),
            dpclip_core::ClipMode::Normalized { bound } => ("normalized", bound),
            dpclip_core::ClipMode::AutoS { gamma } => ("auto_s", gamma),
        };
        let _ = writeln!(
            best,
            "best {level} config_index={} eta={} batch_size={} clip_mode={mode} clip_param={param} mean_accuracy={}",
            a.config_index,
            a.config.eta,
            a.config.batch_size,
            a.mean_accuracy.unwrap_or(f64::NAN)
        );
    }
    let failures = res.records.iter().filter(|r| r.accuracy().is_none()).count();
    if failures > 0 {
        log::warn!("{failures} of {} runs failed or diverged", res.records.len());
    }
    ctx.write("best.txt", &best)?;
    print!("{best}");
    Ok(())
}
