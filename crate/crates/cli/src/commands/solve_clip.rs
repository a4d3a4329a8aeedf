use std::path::PathBuf;

use dpclip_core::clipopt::{grid_oracle, log_grid, mse_of_c, solve_optimal_c, ClipSolution};
use dpclip_core::KvConfig;
use serde::Serialize;

use crate::cli::{CommonArgs, SolveClipArgs};
use crate::context::{flags, read, with_seed, Context};
use crate::error::CliError;
use crate::gradfile;

const KEYS: &[&str] = &["grads_file", "sigma", "oracle", "oracle_points"];
pub const DEFAULT_ORACLE_POINTS: usize = 100_000;
/// Solver MSE may exceed the grid optimum by at most this.
pub const ORACLE_SLACK: f64 = 1e-9;

#[derive(Serialize)]
struct OracleCheck {
    points: usize,
    c: f64,
    mse: f64,
    agrees: bool,
}

#[derive(Serialize)]
struct Output {
    sigma: f64,
    examples: usize,
    dim: usize,
    #[serde(flatten)]
    solution: ClipSolution,
    #[serde(skip_serializing_if = "Option::is_none")]
    oracle: Option<OracleCheck>,
}

pub fn run(common: &CommonArgs, args: &SolveClipArgs) -> Result<(), CliError> {
    let inline = flags([
        ("grads_file", args.grads_file.as_ref().map(|p| p.display().to_string())),
        ("sigma", args.sigma.map(|v| v.to_string())),
        ("oracle", args.oracle.then(|| "true".to_string())),
        ("oracle_points", args.oracle_points.map(|v| v.to_string())),
    ]);
    let ctx = Context::resolve(common, "solve-clip", &with_seed(KEYS), inline)?;
    let kv = &ctx.config;
    let path: PathBuf = kv.require::<String>("grads_file")?.into();
    let sigma: f64 = kv.require("sigma")?;
    let oracle: bool = kv.get_or("oracle", false)?;
    let points: usize = kv.get_or("oracle_points", DEFAULT_ORACLE_POINTS)?;

    let mut resolved = KvConfig::new();
    resolved.set("grads_file", path.display());
    resolved.set("sigma", sigma);
    resolved.set("oracle", oracle);
    resolved.set("oracle_points", points);
    resolved.set("seed", kv.get_or::<u64>("seed", 0)?);
    ctx.write_manifest(&resolved)?;

    let grads = gradfile::parse(&read(&path)?)?;
    let solution = solve_optimal_c(&grads, sigma)?;
    let check = if oracle {
        let max = grads.norms().into_iter().fold(0.0, f64::max);
        if max == 0.0 {
            return Err(CliError::Usage("--oracle needs at least one non-zero gradient".into()));
        }
        // c* never exceeds the largest norm.
        let grid = log_grid(max * 1e-8, max, points.max(2));
        let (c, mse) = grid_oracle(&grads, sigma, &grid)?;
        let solver_mse = mse_of_c(&grads, sigma, solution.c_star)?;
        Some(OracleCheck {
            points: grid.len(),
            c,
            mse,
            agrees: solver_mse <= mse + ORACLE_SLACK,
        })
    } else {
        None
    };
    let disagree = check.as_ref().is_some_and(|c| !c.agrees);
    let out = Output {
        sigma,
        examples: grads.len(),
        dim: grads.dim(),
        solution,
        oracle: check,
    };
    let json = serde_json::to_string(&out)?;
    println!("{json}");
    ctx.write("solution.json", &format!("{json}\n"))?;
    if disagree {
        return Err(CliError::Numeric("solver MSE exceeds the grid oracle".into()));
    }
    Ok(())
}
