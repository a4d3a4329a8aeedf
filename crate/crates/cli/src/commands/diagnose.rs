use std::path::PathBuf;

use dpclip_core::diagnostics::{
    class_diagnostic_rows, class_rows_csv, histogram_csv, quantiles_csv, summarize_norms, DEFAULT_HISTOGRAM_BINS,
};
use dpclip_core::harness::RunMetrics;
use dpclip_core::kvconfig::join_list;
use dpclip_core::KvConfig;

use super::train::{Checkpoint, CHECKPOINT, GRADIENTS, LABELS, METRICS};
use crate::cli::{CommonArgs, DiagnoseArgs};
use crate::context::{flags, ndjson, read, with_seed, Context};
use crate::error::CliError;
use crate::gradfile;

const KEYS: &[&str] = &["run_dir", "clip_bounds", "bins"];

pub fn run(common: &CommonArgs, args: &DiagnoseArgs) -> Result<(), CliError> {
    let inline = flags([
        ("run_dir", args.run_dir.as_ref().map(|p| p.display().to_string())),
        ("clip_bounds", args.clip_bounds.clone()),
        ("bins", args.bins.map(|v| v.to_string())),
    ]);
    let mut ctx = Context::resolve(common, "diagnose", &with_seed(KEYS), inline)?;
    let run_dir: PathBuf = ctx.config.require::<String>("run_dir")?.into();
    let bounds: Vec<f64> = ctx
        .config
        .get_list("clip_bounds")?
        .unwrap_or_else(|| vec![0.1, 1.0, 10.0]);
    let bins: usize = ctx.config.get_or("bins", DEFAULT_HISTOGRAM_BINS)?;
    if bounds.is_empty() || bounds.iter().any(|c| c.is_nan() || *c <= 0.0) {
        return Err(CliError::Usage("clip_bounds must be positive".into()));
    }
    if common.output_dir.is_none() {
        ctx.output_dir = run_dir.join("diagnostics");
    }
    let mut resolved = KvConfig::new();
    resolved.set("run_dir", run_dir.display());
    resolved.set("clip_bounds", join_list(&bounds));
    resolved.set("bins", bins);
    resolved.set("seed", ctx.config.get_or::<u64>("seed", 0)?);
    ctx.write_manifest(&resolved)?;

    let labels: Vec<usize> = read(&run_dir.join(LABELS))?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("bad label {l:?} in {LABELS}")))
        })
        .collect::<Result<_, _>>()?;
    let grads = gradfile::parse(&read(&run_dir.join(GRADIENTS))?)?.with_labels(labels)?;
    let metrics: RunMetrics = serde_json::from_str(&read(&run_dir.join(METRICS))?)?;
    let checkpoint: Checkpoint = serde_json::from_str(&read(&run_dir.join(CHECKPOINT))?)?;
    let accuracy = metrics.last().map(|e| e.per_class_accuracy.clone()).unwrap_or_default();

    let rows = class_diagnostic_rows(&grads, &accuracy, &bounds, checkpoint.task.num_classes)?;
    let summary = summarize_norms(&grads.norms(), bins)?;
    if ctx.format.csv() {
        ctx.write("retained_weights.csv", &class_rows_csv(&rows))?;
        ctx.write("norm_quantiles.csv", &quantiles_csv(&summary))?;
        ctx.write("norm_histogram.csv", &histogram_csv(&summary))?;
    }
    if ctx.format.ndjson() {
        ctx.write("retained_weights.ndjson", &ndjson(&rows)?)?;
        ctx.write("norms.ndjson", &ndjson(std::slice::from_ref(&summary))?)?;
    }
    println!(
        "examples={} classes={} bounds={} median_norm={}",
        grads.len(),
        checkpoint.task.num_classes,
        join_list(&bounds),
        summary.median()
    );
    Ok(())
}
