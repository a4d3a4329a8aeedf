use dpclip_core::accountant::{account, calibrate_sigma};
use dpclip_core::KvConfig;
use serde::Serialize;

use crate::cli::{CalibrateArgs, CommonArgs};
use crate::context::{flags, with_seed, Context};
use crate::error::CliError;

const KEYS: &[&str] = &["epsilon", "delta", "sampling_rate", "steps"];

#[derive(Serialize)]
struct Calibration {
    sigma: f64,
    epsilon: f64,
    target_epsilon: f64,
    delta: f64,
    sampling_rate: f64,
    steps: u64,
}

pub fn run(common: &CommonArgs, args: &CalibrateArgs) -> Result<(), CliError> {
    let inline = flags([
        ("epsilon", args.epsilon.map(|v| v.to_string())),
        ("delta", args.delta.map(|v| v.to_string())),
        ("sampling_rate", args.sampling_rate.map(|v| v.to_string())),
        ("steps", args.steps.map(|v| v.to_string())),
    ]);
    let ctx = Context::resolve(common, "calibrate", &with_seed(KEYS), inline)?;
    let kv = &ctx.config;
    let target: f64 = kv.require("epsilon")?;
    let delta: f64 = kv.get_or("delta", 1e-5)?;
    let q: f64 = kv.require("sampling_rate")?;
    let steps: u64 = kv.require("steps")?;

    let mut resolved = KvConfig::new();
    resolved.set("epsilon", target);
    resolved.set("delta", delta);
    resolved.set("sampling_rate", q);
    resolved.set("steps", steps);
    resolved.set("seed", kv.get_or::<u64>("seed", 0)?);
    ctx.write_manifest(&resolved)?;

    let sigma = calibrate_sigma(target, delta, q, steps)?;
    let epsilon = account(sigma, q, steps, delta)?;
    let rec = Calibration {
        sigma,
        epsilon,
        target_epsilon: target,
        delta,
        sampling_rate: q,
        steps,
    };
    let line = format!(
        "sigma={sigma} epsilon={epsilon} target_epsilon={target} delta={delta} sampling_rate={q} steps={steps}"
    );
    let json = serde_json::to_string(&rec)?;
    println!("{line}");
    println!("{json}");
    ctx.write("calibration.txt", &format!("{line}\n"))?;
    ctx.write("calibration.json", &format!("{json}\n"))
}
