use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use dmfp_core::commands::{run_subcommand, Subcommand};
use dmfp_core::config::load_config;
use dmfp_core::dmfp::BackendKind;
use dmfp_core::parallel::{with_workers, workers_from_env};
use dmfp_core::DmfpError;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Command {
    /// Draw one MDP from the prior.
    Sample,
    /// Draw one MDP and solve it by value iteration.
    Solve,
    /// Run the mean-field moment recursion.
    Dmfp,
    /// Compare a Monte-Carlo ensemble against the recursion.
    Validate,
    /// Fixed point and Jacobian spectrum of the i.i.d. recursion.
    Stability,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Backend {
    Gumbel,
    Quadrature,
}

/// Dynamic mean field programming for Bayesian Q-value posteriors.
#[derive(Debug, Parser)]
#[command(name = "dmfp", version)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// Flat JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides the config's output_dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Max-moment backend (overrides the config).
    #[arg(long, value_enum)]
    backend: Option<Backend>,
}

fn run(cli: Cli) -> Result<(), DmfpError> {
    let mut config = load_config(&cli.config)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(b) = cli.backend {
        config.backend = match b {
            Backend::Gumbel => BackendKind::Gumbel,
            Backend::Quadrature => BackendKind::Quadrature,
        };
    }
    let out = cli.out.unwrap_or_else(|| config.output_dir.clone());
    let cmd = match cli.command {
        Command::Sample => Subcommand::Sample,
        Command::Solve => Subcommand::Solve,
        Command::Dmfp => Subcommand::Dmfp,
        Command::Validate => Subcommand::Validate,
        Command::Stability => Subcommand::Stability,
    };
    let written = with_workers(workers_from_env(), || run_subcommand(cmd, &config, &out))?;
    for path in written {
        println!("{}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dmfp: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
