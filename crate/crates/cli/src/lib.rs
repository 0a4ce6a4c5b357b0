//! Configuration, orchestration and persistence for `heatchain` runs.

pub mod commands;
pub mod config;
pub mod output;

use std::path::Path;
use std::time::Instant;

use anyhow::{Context, Result};
use heatchain::streams::GENERATOR_NAME;

pub use commands::{Command, Outcome};
pub use config::{parse_config, parse_config_str, ConfigError, RunConfig};
use output::{append_manifest, sha256_hex, write_atomic, OutputDigest, RunManifest};

/// Exit code for a run whose checks failed.
pub const EXIT_CHECK_FAILED: i32 = 2;

/// Result of [`execute`].
#[derive(Debug, Clone)]
pub struct Report {
    pub exit_code: i32,
    pub outcome: Outcome,
    pub manifest: RunManifest,
}

/// Runs `command`, writes every table atomically into `out_dir`, appends the
/// manifest to `out_dir/runs.log` and returns the exit code.
pub fn execute(command: Command, config: &RunConfig, seed: u64, out_dir: &Path, threads: usize) -> Result<Report> {
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let start = Instant::now();
    let outcome = commands::run(command, config, seed)?;
    let mut outputs = Vec::with_capacity(outcome.tables.len());
    for table in &outcome.tables {
        let bytes = table.render()?;
        let sha256 = write_atomic(out_dir, &table.file, &bytes)?;
        outputs.push(OutputDigest {
            file: table.file.clone(),
            sha256,
        });
    }
    let exit_code = if outcome.failures.is_empty() {
        0
    } else {
        EXIT_CHECK_FAILED
    };
    let manifest = RunManifest {
        subcommand: command.name().to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        generator: GENERATOR_NAME.to_string(),
        master_seed: seed,
        task_seeds: outcome.task_seeds.clone(),
        threads,
        config_sha256: sha256_hex(config.source.as_bytes()),
        config: config.source.clone(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        integration_steps: outcome.integration_steps,
        exit_code,
        outputs,
    };
    append_manifest(out_dir, &manifest)?;
    Ok(Report {
        exit_code,
        outcome,
        manifest,
    })
}
