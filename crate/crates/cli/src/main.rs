use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rvi_cli::{build_plan, compare_runs, run_experiment, CliError, Command, ExperimentMode};

#[derive(Parser)]
#[command(name = "rvi", version, about = "Ergodic control by relative value iteration")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Args)]
struct Common {
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set mc.paths=2000`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvolveMode {
    Vi,
    Rvi,
    RviMin,
}

#[derive(Subcommand)]
enum Sub {
    /// Policy iteration for (rho, V*, v*).
    Solve(Common),
    /// Solve, then march VI or RVI and run the boundedness checks.
    Evolve {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        mode: Option<EvolveMode>,
    },
    /// Solve, then the Monte Carlo cross-checks.
    Simulate(Common),
    /// Solve, RVI, coupling, Monte Carlo and checks.
    Full(Common),
    /// Compare the diagnostics of two runs.
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, default_value = "comparison")]
        out: PathBuf,
    },
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let (common, command) = match cli.command {
        Sub::Compare { a, b, out } => {
            let c = compare_runs(&a, &b, &out)?;
            println!("compared {} sampled times; output in {}", c.rows, out.display());
            for (name, d) in &c.max_differences {
                println!("  max |{name} difference| = {d:.6e}");
            }
            for f in &c.final_errors {
                println!("  final {}: {:.6e} vs {:.6e} (ratio {:.4})", f.quantity, f.run_a, f.run_b, f.ratio);
            }
            return Ok(());
        }
        Sub::Solve(c) => (c, Command::Solve),
        Sub::Simulate(c) => (c, Command::Simulate),
        Sub::Full(c) => (c, Command::Full),
        Sub::Evolve { common, mode } => {
            let mode = mode.map(|m| match m {
                EvolveMode::Vi => ExperimentMode::Vi,
                EvolveMode::Rvi => ExperimentMode::Rvi,
                EvolveMode::RviMin => ExperimentMode::RviMin,
            });
            (common, Command::Evolve(mode))
        }
    };
    let plan = build_plan(common.config.as_deref(), &common.sets, common.out, common.seed, command)?;
    let manifest = run_experiment(&plan, command.name())?;
    println!("{} run of {} finished; output in {}", command.name(), plan.config.preset, plan.config.out.display());
    for (k, v) in &manifest.summary {
        println!("  {k} = {v}");
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
