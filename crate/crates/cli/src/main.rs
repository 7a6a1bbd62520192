use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use clsrivc::experiment::{self, Command, RunOptions};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Cmd {
    /// Check the standing assumptions only.
    Validate,
    /// Simulate the loop and write the dataset.
    Simulate,
    /// Run the estimator and write its iteration trace.
    Estimate,
    /// Monte Carlo error over the configured record lengths.
    Sweep,
    /// Noise-free bias certificate at the converged point.
    Certify,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Validate => Command::Validate,
            Cmd::Simulate => Command::Simulate,
            Cmd::Estimate => Command::Estimate,
            Cmd::Sweep => Command::Sweep,
            Cmd::Certify => Command::Certify,
        }
    }
}

/// Closed-loop continuous-time identification experiments.
#[derive(Debug, Parser)]
#[command(name = "clsrivc", version)]
struct Cli {
    #[arg(value_enum)]
    command: Cmd,
    /// Experiment configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the disturbance seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: current directory).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run even when an assumption check fails.
    #[arg(long)]
    force: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let opts = RunOptions {
        seed: cli.seed,
        out_dir: cli.out,
        force: cli.force,
    };
    match experiment::run(&cli.config, cli.command.into(), &opts) {
        Ok(outcome) => {
            print!("{}", outcome.summary);
            if let Some(p) = &outcome.csv_path {
                println!("csv: {}", p.display());
            }
            ExitCode::from(outcome.exit_code as u8)
        }
        Err(e) => {
            eprintln!("clsrivc: {e}");
            ExitCode::from(experiment::exit_code(&e) as u8)
        }
    }
}
