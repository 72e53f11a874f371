//! Experiment driver for `rvi-core`: reads a JSON configuration, runs the
//! requested phases and writes CSV/JSON artifacts plus a checksummed
//! manifest.

pub mod compare;
pub mod config;
pub mod error;
pub mod experiment;
pub mod output;

use std::path::{Path, PathBuf};

pub use compare::{compare_runs, Comparison};
pub use config::{ExperimentConfig, ExperimentMode, Plan};
pub use error::CliError;
pub use experiment::run_experiment;
pub use output::RunManifest;

/// Which phases a subcommand runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Solve,
    /// An explicit evolution mode, or the configured one.
    Evolve(Option<ExperimentMode>),
    Simulate,
    Full,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Solve => "solve",
            Command::Evolve(_) => "evolve",
            Command::Simulate => "simulate",
            Command::Full => "full",
        }
    }
}

/// Assembles and validates a configuration. Nothing is written.
pub fn build_plan(
    config: Option<&Path>,
    sets: &[String],
    out: Option<PathBuf>,
    seed: Option<u64>,
    command: Command,
) -> Result<Plan, CliError> {
    let base = config.map(ExperimentConfig::load).transpose()?;
    let mut cfg = ExperimentConfig::from_parts(base, sets)?;
    if let Some(out) = out {
        cfg.out = out;
    }
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    cfg.mode = match command {
        Command::Solve => ExperimentMode::Pia,
        Command::Simulate => ExperimentMode::McCheck,
        Command::Full => ExperimentMode::Full,
        Command::Evolve(Some(m)) => m,
        Command::Evolve(None) if cfg.mode.evolution_mode().is_some() => cfg.mode,
        Command::Evolve(None) => ExperimentMode::Rvi,
    };
    if let Command::Evolve(Some(m)) = command {
        if m.evolution_mode().is_none() {
            return Err(CliError::Config(format!("evolve needs vi, rvi or rvi-min, got {m:?}")));
        }
    }
    cfg.validate()
}
