//! Batch experiment runner.
//!
//! ```text
//! credit-grid run --config configs/desk.toml --stage all --out out/desk --threads 8 --seed 42
//! ```
//!
//! Stages write CSV result tables (each prefixed with a manifest comment
//! line) plus a JSON manifest per stage. Re-running a stage with the same
//! config and seed reproduces its CSV outputs byte for byte.

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Parser, Subcommand};

use credit_grid_core::config::ExperimentConfig;
use credit_grid_core::experiments::{run_stage, Stage, StageContext};

#[derive(Parser)]
#[command(name = "credit-grid", version, about = "Credit-loss valuation grid experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment stage or the whole pipeline.
    Run {
        /// Experiment configuration (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Stage: datagen|calibrate|projection|mc_convergence|epd_grid|elgd|loss|all.
        #[arg(long, default_value = "all")]
        stage: String,
        /// Output directory for CSVs and manifests.
        #[arg(long)]
        out: PathBuf,
        /// Worker threads (0 = automatic).
        #[arg(long, default_value_t = 0)]
        threads: usize,
        /// Seed override; defaults to the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn run() -> Result<(), String> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, stage, out, threads, seed } => {
            if threads > 0 {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build_global()
                    .map_err(|e| format!("thread pool: {e}"))?;
            }
            let stage = Stage::from_str(&stage).map_err(|e| e.to_string())?;
            let config = ExperimentConfig::load(&config).map_err(|e| e.to_string())?;
            let ctx = StageContext::new(&config, &out, seed).map_err(|e| e.to_string())?;
            let reports = run_stage(stage, &ctx).map_err(|e| e.to_string())?;
            for report in reports {
                println!("stage {:<15} {:>8.2}s  {}", report.stage, report.wall_seconds, report.files.join(", "));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::FAILURE
        }
    }
}
