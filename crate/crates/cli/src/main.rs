//! `mgslab` command-line runner.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 numerical abort.

mod commands;
mod config;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{CommandFactory, Parser, Subcommand};

use commands::{BenchArgs, InspectArgs, SweepArgs, TrainArgs, TuneArgs};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numerical(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) | CliError::Numerical(m) => f.write_str(m),
        }
    }
}

impl From<mgslab::Error> for CliError {
    fn from(e: mgslab::Error) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Config(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Config(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "mgslab", version, about = "Model gradient similarity training lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and record its metric trace.
    Train(TrainArgs),
    /// Run scenarios several times and tabulate final and best metrics.
    Bench(BenchArgs),
    /// Vary one training setting at a time around a base run.
    Sweep(SweepArgs),
    /// Kernel and spectrum of a checkpoint on a batch.
    Inspect(InspectArgs),
    /// Two-circles run plus a decision-boundary grid.
    TwoCircles(TrainArgs),
    /// Grid-search a regulariser strength.
    Tune(TuneArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.render().to_string();
            eprint!("{text}");
            if text.contains("Usage:") {
                return ExitCode::from(2);
            }
            let mut cmd = Cli::command();
            cmd.build();
            let usage = match std::env::args()
                .nth(1)
                .and_then(|n| cmd.find_subcommand_mut(&n).cloned())
            {
                Some(mut sub) => sub.render_usage(),
                None => cmd.render_usage(),
            };
            eprintln!("\n{usage}");
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Train(a) => commands::train(a, false),
        Command::TwoCircles(a) => commands::train(a, true),
        Command::Bench(a) => commands::bench(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Inspect(a) => commands::inspect(a),
        Command::Tune(a) => commands::tune(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Numerical(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}
