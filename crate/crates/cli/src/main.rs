use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;

use config::Opts;

/// Mixed-spectrum time-series fitting and Levy-process classification.
#[derive(Parser, Debug)]
#[command(name = "mixspec", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate scenario series plus a truth manifest.
    Simulate(Opts),
    /// Fit the functional and stochastic models to one series.
    Fit(Opts),
    /// Run the N-step classification on a file, a directory, or a fresh
    /// simulated ensemble.
    Classify(Opts),
    /// Compare the residual-signal variance formulas with brute force.
    OracleCheck(Opts),
    /// Summarise a directory of classification reports.
    Report(Opts),
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let (opts, cmd): (Opts, fn(&Opts) -> anyhow::Result<()>) = match cli.command {
        Command::Simulate(o) => (o, commands::simulate),
        Command::Fit(o) => (o, commands::fit),
        Command::Classify(o) => (o, commands::classify),
        Command::OracleCheck(o) => (o, commands::oracle_check),
        Command::Report(o) => (o, commands::report),
    };
    let opts = opts.merge_config_file()?;
    if let Some(j) = opts.jobs {
        anyhow::ensure!(j >= 1, "--jobs must be at least 1");
        rayon::ThreadPoolBuilder::new().num_threads(j).build_global()?;
    }
    cmd(&opts)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
