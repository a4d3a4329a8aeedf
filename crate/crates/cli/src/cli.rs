use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "dpclip", version, about = "Differentially private training toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one configuration key; repeatable, later wins.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Run seed (the master seed for sweeps).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory for output files and the manifest [default: dpclip-out].
    #[arg(long, global = true, value_name = "DIR")]
    pub output_dir: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = OutputFormat::Csv)]
    pub output_format: OutputFormat,
    /// Log progress to stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Csv,
    Ndjson,
    Both,
}

impl OutputFormat {
    pub fn csv(self) -> bool {
        self != OutputFormat::Ndjson
    }

    pub fn ndjson(self) -> bool {
        self != OutputFormat::Csv
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Noise multiplier reaching a target ε.
    Calibrate(CalibrateArgs),
    /// Batch-size table and recommendation for a fixed number of epochs.
    Plan(PlanArgs),
    /// MSE-optimal clipping bound for a batch of gradients.
    SolveClip(SolveClipArgs),
    /// Train one configuration on a synthetic task.
    Train,
    /// Grid sweep over η, batch size, clipping and privacy.
    Sweep,
    /// Retained-weight and gradient-norm diagnostics of a finished run.
    Diagnose(DiagnoseArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Calibrate(_) => "calibrate",
            Command::Plan(_) => "plan",
            Command::SolveClip(_) => "solve-clip",
            Command::Train => "train",
            Command::Sweep => "sweep",
            Command::Diagnose(_) => "diagnose",
        }
    }
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub sampling_rate: Option<f64>,
    #[arg(long)]
    pub steps: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[arg(long)]
    pub dataset_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<u64>,
    #[arg(long)]
    pub delta: Option<f64>,
    /// Comma-separated ε targets.
    #[arg(long)]
    pub epsilons: Option<String>,
    /// Comma-separated batch candidates.
    #[arg(long)]
    pub batch_sizes: Option<String>,
    #[arg(long)]
    pub min_steps: Option<u64>,
    #[arg(long)]
    pub plateau_tolerance: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SolveClipArgs {
    #[arg(long, value_name = "FILE")]
    pub grads_file: Option<PathBuf>,
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Cross-check against a log-grid search.
    #[arg(long)]
    pub oracle: bool,
    /// Grid points for --oracle.
    #[arg(long)]
    pub oracle_points: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    /// Output directory of a finished `train` run.
    #[arg(long, value_name = "DIR")]
    pub run_dir: Option<PathBuf>,
    /// Comma-separated clipping bounds.
    #[arg(long)]
    pub clip_bounds: Option<String>,
    #[arg(long)]
    pub bins: Option<usize>,
}
