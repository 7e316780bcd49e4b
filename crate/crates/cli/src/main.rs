//! `kvroute`: calibrate, solve, simulate, and report per-layer KV-cache routing.

mod calibrate;
mod config;
mod io;
mod report;
mod simulate;
mod solve;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use kvroute_core::Error;

use crate::config::{Settings, SharedArgs};

#[derive(Debug, Parser)]
#[command(
    name = "kvroute",
    version,
    about = "Per-layer KV-cache compression routing on a toy transformer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    shared: SharedArgs,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Measure per-layer sensitivity tables
    Calibrate,
    /// Route every layer under each (policy, budget) and write plans
    Solve,
    /// Decode synthetic prompts under each plan and compare with the dense model
    Simulate,
    /// Consolidate a run directory into report.md
    Report {
        /// Run directory (default: --out)
        dir: Option<PathBuf>,
    },
}

pub const EXIT_OTHER: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_INFEASIBLE: u8 = 3;
pub const EXIT_IO: u8 = 4;
pub const EXIT_FORMAT: u8 = 5;

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Config(_) | Error::Input(_) | Error::StaleCalibration { .. } | Error::Size(_)) => EXIT_CONFIG,
        Some(Error::Infeasible { .. }) => EXIT_INFEASIBLE,
        Some(Error::Io { .. }) => EXIT_IO,
        Some(Error::Format(_)) => EXIT_FORMAT,
        _ => EXIT_OTHER,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let settings = Settings::resolve(&cli.shared)?;
    match cli.command {
        Command::Calibrate => calibrate::run(&settings),
        Command::Solve => solve::run(&settings),
        Command::Simulate => simulate::run(&settings),
        Command::Report { dir } => report::run(&dir.unwrap_or(settings.out)),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
