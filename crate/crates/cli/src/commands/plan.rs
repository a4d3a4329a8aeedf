use std::fmt::Write as _;

use dpclip_core::planner::{plan, plan_csv, BatchPlanRow, PlanConfig};

use crate::cli::{CommonArgs, PlanArgs};
use crate::context::{flags, ndjson, with_seed, Context};
use crate::error::CliError;

fn recommendation_lines(rows: &[BatchPlanRow], cfg: &PlanConfig) -> String {
    let mut s = String::new();
    for &eps in &cfg.epsilon_targets {
        match rows.iter().find(|r| r.epsilon == eps && r.recommended) {
            Some(r) => {
                let _ = writeln!(
                    s,
                    "recommend epsilon={eps} batch_size={} steps={} sigma={} cumulative_noise={}",
                    r.batch_size,
                    r.steps,
                    r.sigma.unwrap_or(f64::NAN),
                    r.cumulative_noise.unwrap_or(f64::NAN)
                );
            }
            None => {
                let _ = writeln!(s, "recommend epsilon={eps} batch_size=none min_steps={}", cfg.min_steps);
            }
        }
    }
    s
}

pub fn run(common: &CommonArgs, args: &PlanArgs) -> Result<(), CliError> {
    let inline = flags([
        ("dataset_size", args.dataset_size.map(|v| v.to_string())),
        ("epochs", args.epochs.map(|v| v.to_string())),
        ("delta", args.delta.map(|v| v.to_string())),
        ("epsilons", args.epsilons.clone()),
        ("batch_sizes", args.batch_sizes.clone()),
        ("min_steps", args.min_steps.map(|v| v.to_string())),
        ("plateau_tolerance", args.plateau_tolerance.map(|v| v.to_string())),
    ]);
    let ctx = Context::resolve(common, "plan", &with_seed(PlanConfig::KEYS), inline)?;
    let cfg = PlanConfig::from_kv(&ctx.config)?.normalized()?;
    let mut resolved = cfg.to_kv();
    resolved.set("seed", ctx.config.get_or::<u64>("seed", 0)?);
    ctx.write_manifest(&resolved)?;

    log::info!(
        "planning {} epsilons x {} batch sizes",
        cfg.epsilon_targets.len(),
        cfg.batch_candidates.len()
    );
    let rows = plan(&cfg)?;
    if ctx.format.csv() {
        ctx.write("plan.csv", &plan_csv(&rows))?;
    }
    if ctx.format.ndjson() {
        ctx.write("plan.ndjson", &ndjson(&rows)?)?;
    }
    ctx.write("plan.json", &format!("{}\n", serde_json::to_string_pretty(&rows)?))?;
    let rec = recommendation_lines(&rows, &cfg);
    ctx.write("recommendations.txt", &rec)?;
    print!("{rec}");
    Ok(())
}
