//! `nanoslam`: run, compare and simulate SLAM filters from the command line.
//!
//! Exit codes: 0 success, 1 failed self-test, 2 configuration error,
//! 3 data error, 4 numerical divergence.

mod commands;
mod settings;

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nanoslam::SlamError;

use settings::Settings;

#[derive(Debug, Parser)]
#[command(name = "nanoslam", version, about = "Landmark SLAM with natural-gradient particle proposals")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one filter over a dataset or synthetic world and write a run CSV.
    Run(Settings),
    /// Run several filters on the same input and print a comparison table.
    Compare(Settings),
    /// Write a synthetic event file.
    Simulate(Settings),
    /// Check the numerical core against independent oracles.
    Selftest(commands::SelftestArgs),
}

fn exit_code(e: &SlamError) -> u8 {
    match e {
        SlamError::Config(_) => 2,
        SlamError::Divergence(_) | SlamError::NotPositiveDefinite(_) => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(flags) => Settings::resolve(flags).and_then(|s| commands::run(&s)),
        Command::Compare(flags) => Settings::resolve(flags).and_then(|s| commands::compare(&s)),
        Command::Simulate(flags) => Settings::resolve(flags).and_then(|s| commands::simulate(&s)),
        Command::Selftest(args) => Ok(commands::selftest(&args)),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
