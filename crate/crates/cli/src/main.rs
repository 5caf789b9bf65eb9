//! Command line driver for subspace tracking experiments.
//!
//! Every subcommand reads one TOML config, runs its experiment, writes CSVs
//! plus a `manifest.json` into the output directory, and prints a short
//! summary. Config problems (unreadable file, unknown or missing keys,
//! rejected values) exit with status 2; runtime failures exit with 1.

mod config;
mod drivers;
mod manifest;
mod metrics;

use clap::{Args, Parser, Subcommand};
use config::{Config, ConfigError};
use drivers::{DriverOutput, RunContext};
use manifest::{Manifest, Versions};
use std::path::PathBuf;
use std::time::Instant;

#[derive(Parser)]
#[command(name = "norst", version, about = "Robust subspace tracking experiment harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Error-versus-time curves for the configured algorithm.
    Curve(RunArgs),
    /// Success-rate grid over outlier occupancy and rank.
    Phase(RunArgs),
    /// Outlier-magnitude sweep with fixed tracker thresholds.
    Xmin(RunArgs),
    /// Batch PCA error against its noise bound.
    PcaSddn(RunArgs),
    /// Tracking with missing entries.
    StMiss(RunArgs),
    /// Generate one synthetic scene and store it with ground truth.
    GenScene(RunArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Curve(_) => "curve",
            Command::Phase(_) => "phase",
            Command::Xmin(_) => "xmin",
            Command::PcaSddn(_) => "pca-sddn",
            Command::StMiss(_) => "st-miss",
            Command::GenScene(_) => "gen-scene",
        }
    }

    fn args(&self) -> &RunArgs {
        match self {
            Command::Curve(a)
            | Command::Phase(a)
            | Command::Xmin(a)
            | Command::PcaSddn(a)
            | Command::StMiss(a)
            | Command::GenScene(a) => a,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// Path to the experiment TOML.
    #[arg(long)]
    config: PathBuf,
    /// Master seed; overrides experiment.seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Trial count; overrides experiment.trials from the config.
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    trials: Option<u32>,
    /// Output directory, created if absent; overrides experiment.output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for trial-level parallelism.
    #[arg(long, env = "NORST_THREADS", default_value_t = 1,
          value_parser = clap::value_parser!(u32).range(1..))]
    threads: u32,
}

fn main() {
    env_logger::init();
    let cli = Cli::parse();
    if let Err(error) = run(cli) {
        eprintln!("error: {error:#}");
        let config_problem = error.is::<ConfigError>()
            || error.chain().any(|cause| cause.downcast_ref::<ConfigError>().is_some());
        std::process::exit(if config_problem { 2 } else { 1 });
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let name = cli.command.name();
    let args = cli.command.args();
    let config = Config::load(&args.config)?;

    let seed = args.seed.unwrap_or(config.experiment.seed);
    let trials = args.trials.map_or(config.experiment.trials, |t| t as usize);
    let out = args
        .out
        .clone()
        .or_else(|| config.experiment.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&out)?;

    let ctx = RunContext {
        config_path: args.config.clone(),
        config,
        seed,
        trials,
        threads: args.threads as usize,
        out,
    };

    let start = Instant::now();
    let DriverOutput { mut outputs, notes } = match &cli.command {
        Command::Curve(_) => drivers::run_error_curve(&ctx)?,
        Command::Phase(_) => drivers::run_phase_transition(&ctx)?,
        Command::Xmin(_) => drivers::run_xmin_study(&ctx)?,
        Command::PcaSddn(_) => drivers::run_pca_sddn(&ctx)?,
        Command::StMiss(_) => drivers::run_st_missing(&ctx)?,
        Command::GenScene(_) => drivers::gen_scene(&ctx)?,
    };

    let manifest = Manifest {
        command: name.to_string(),
        config: ctx.config.clone(),
        seed,
        trials,
        threads: ctx.threads,
        versions: Versions::current(),
        outputs: {
            outputs.push("manifest.json".into());
            outputs
        },
        notes: notes.clone(),
        wall_ms: start.elapsed().as_millis(),
    };
    manifest.write(&ctx.out)?;

    println!("{name}: {trials} trials, seed {seed}, outputs in {}", ctx.out.display());
    for file in &manifest.outputs {
        println!("  wrote {}", ctx.out.join(file).display());
    }
    for note in &notes {
        println!("note: {note}");
    }
    Ok(())
}
