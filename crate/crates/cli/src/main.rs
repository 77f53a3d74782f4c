//! `epirenew`: simulate, fit, summarize and validate renewal-model runs
//! described by a TOML manifest.
//!
//! Exit codes: 0 success, 1 usage error, 2 data validation failure,
//! 3 convergence failure.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{Failure, Outcome, Overrides};
use manifest::Manifest;

#[derive(Parser)]
#[command(name = "epirenew", version, about = "Bayesian renewal-equation epidemic model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run manifest (TOML).
    manifest: PathBuf,
    /// Overrides `chains.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `chains.n_chains`.
    #[arg(long)]
    chains: Option<usize>,
    /// Overrides `output.dir`.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from known parameters.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// True parameters as JSON.
        #[arg(long)]
        truth: PathBuf,
    },
    /// Sample the posterior and write the report.
    Fit {
        #[command(flatten)]
        common: Common,
        /// Exit 0 even when R-hat exceeds the threshold.
        #[arg(long)]
        allow_nonconverged: bool,
        /// Check inputs and print the model dimensions without sampling.
        #[arg(long)]
        dry_run: bool,
    },
    /// Rebuild the report from stored draws.
    Summarize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        allow_nonconverged: bool,
    },
    /// Check inputs, pmfs and prior predictive sanity.
    Validate {
        #[command(flatten)]
        common: Common,
    },
}

fn load(common: &Common) -> Result<Manifest, Failure> {
    let mut m = Manifest::load(&common.manifest).map_err(Failure::Usage)?;
    Overrides {
        seed: common.seed,
        chains: common.chains,
        output: common.output.clone(),
    }
    .apply(&mut m)?;
    Ok(m)
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Simulate { common, truth } => commands::cmd_simulate(&load(&common)?, &truth),
        Command::Fit {
            common,
            allow_nonconverged,
            dry_run,
        } => commands::cmd_fit(&load(&common)?, dry_run, allow_nonconverged),
        Command::Summarize {
            common,
            allow_nonconverged,
        } => commands::cmd_summarize(&load(&common)?, allow_nonconverged),
        Command::Validate { common } => commands::cmd_validate(&load(&common)?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help and version requests are not errors
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{f}");
            ExitCode::from(f.exit_code())
        }
    }
}
