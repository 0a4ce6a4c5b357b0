use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use heatchain_cli::{execute, parse_config, Command};

/// Simulations, large-deviation estimators and oracles for a heat-conducting
/// oscillator chain.
#[derive(Debug, Parser)]
#[command(name = "heatchain", version)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
    /// Configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed from which every random stream is derived.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Directory for result tables and runs.log.
    #[arg(long, global = true, value_name = "DIR", default_value = ".")]
    out: PathBuf,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    /// Print nothing on success.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Sub {
    /// Integrate one trajectory and record energies, flows and work.
    Simulate,
    /// Ergodic averages of entropy productions and heat flows.
    Average,
    /// Scaled cumulant generating function on an alpha grid.
    Cgf,
    /// Rate function by Legendre transform of a cumulant curve.
    Rate,
    /// Exact Gaussian results or the grid eigensolver.
    Oracle,
    /// Pointwise operator identities at random states.
    CheckIdentities,
    /// Energy-shell return ratios, zero-temperature tracking, mixing time.
    Diagnose,
}

impl From<Sub> for Command {
    fn from(s: Sub) -> Self {
        match s {
            Sub::Simulate => Command::Simulate,
            Sub::Average => Command::Average,
            Sub::Cgf => Command::Cgf,
            Sub::Rate => Command::Rate,
            Sub::Oracle => Command::Oracle,
            Sub::CheckIdentities => Command::CheckIdentities,
            Sub::Diagnose => Command::Diagnose,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: &Cli) -> Result<i32> {
    let path = cli.config.as_ref().context("--config PATH is required")?;
    let config = parse_config(path)?;
    let threads = match cli.threads {
        Some(n) => n,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .context("starting worker threads")?;
    let report = execute(cli.command.into(), &config, cli.seed, &cli.out, threads)?;
    if !cli.quiet {
        for out in &report.manifest.outputs {
            eprintln!("wrote {}", cli.out.join(&out.file).display());
        }
    }
    for failure in &report.outcome.failures {
        eprintln!("check failed: {failure}");
    }
    Ok(report.exit_code)
}
