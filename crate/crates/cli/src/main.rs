//! Command line front end: optimize, sample, postprocess, bounds,
//! experiment.
//!
//! Exit codes: 0 on success, 1 for unusable arguments, 2 for runtime
//! failures (missing files, invalid configurations, diverged chains). Every
//! subcommand is byte-reproducible under a fixed `--seed`.

mod bounds_cmd;
mod common;
mod experiment;
mod optimize;
mod postprocess;
mod sample;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "sgmcmc",
    version,
    about = "Stochastic gradient Langevin sampling with variance-reduced estimators"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Find a centering point by SGD and persist it for later cv runs.
    Optimize(optimize::OptimizeArgs),
    /// Run one Langevin chain and record samples (and gradients).
    Sample(sample::SampleArgs),
    /// Fit zero-variance corrections to a recorded chain.
    Postprocess(postprocess::PostprocessArgs),
    /// Stepsize cap, accuracy budget and contraction envelope for given
    /// curvature constants.
    Bounds(bounds_cmd::BoundsArgs),
    /// Execute a TOML experiment plan.
    Experiment(experiment::ExperimentArgs),
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version are successful outcomes; everything else is
            // a usage error, reported as exit code 1.
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let result = match cli.command {
        Command::Optimize(args) => optimize::run(args),
        Command::Sample(args) => sample::run(args),
        Command::Postprocess(args) => postprocess::run(args),
        Command::Bounds(args) => bounds_cmd::run(args),
        Command::Experiment(args) => experiment::run(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(2);
    }
}
