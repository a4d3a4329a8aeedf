mod cli;
mod commands;
mod context;
mod error;
mod gradfile;

use std::process::ExitCode;

use clap::Parser;

use cli::{Cli, Command};
use error::CliError;

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    let c = &cli.common;
    match &cli.command {
        Command::Calibrate(a) => commands::calibrate::run(c, a),
        Command::Plan(a) => commands::plan::run(c, a),
        Command::SolveClip(a) => commands::solve_clip::run(c, a),
        Command::Train => commands::train::run(c),
        Command::Sweep => commands::sweep::run(c),
        Command::Diagnose(a) => commands::diagnose::run(c, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.common.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    // Verbosity comes from flags only; the environment is not consulted.
    env_logger::Builder::new().filter_level(level).init();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dpclip {}: {e}", cli.command.name());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
