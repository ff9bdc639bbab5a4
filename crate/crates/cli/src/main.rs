use std::ffi::OsString;
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand};

mod common;
mod compare;
mod config;
mod error_map;
mod fit;
mod simulate;
mod sweep;
mod trajectory;

/// Nonparametric ODE estimation by two-step gradient matching.
#[derive(Debug, Parser)]
#[command(name = "gradmatch", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a benchmark system and write noiseless and noisy CSVs.
    Simulate(simulate::Args),
    /// Fit a vector field to one or more observed series.
    Fit(fit::Args),
    /// Integrate a saved model from an initial state.
    Trajectory(trajectory::Args),
    /// Sparse fits over a grid of mixing weights and penalty levels.
    SweepAlpha(sweep::Args),
    /// Trajectory error of a saved model over a grid of initial states.
    ErrorMap(error_map::Args),
    /// Two-step fit against the 3- and 14-parameter simulate-and-fit baselines.
    Compare(compare::Args),
}

fn run(argv: Vec<OsString>) -> anyhow::Result<()> {
    let argv = config::expand(&Cli::command(), argv)?;
    let cli = Cli::try_parse_from(argv)?;
    match cli.command {
        Command::Simulate(a) => simulate::run(a),
        Command::Fit(a) => fit::run(a),
        Command::Trajectory(a) => trajectory::run(a),
        Command::SweepAlpha(a) => sweep::run(a),
        Command::ErrorMap(a) => error_map::run(a),
        Command::Compare(a) => compare::run(a),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.chain().any(|e| e.downcast_ref::<gradmatch::error::Error>().is_some_and(|e| e.is_numerical())) {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    match run(std::env::args_os().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            if let Some(clap_err) = err.downcast_ref::<clap::Error>() {
                let _ = clap_err.print();
                return if clap_err.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
            }
            eprintln!("error: {err}");
            for cause in err.chain().skip(1) {
                eprintln!("  caused by: {cause}");
            }
            ExitCode::from(exit_code(&err))
        }
    }
}
