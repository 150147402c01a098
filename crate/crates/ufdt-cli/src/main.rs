use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ufdt_cli::config::PipelineConfig;
use ufdt_cli::stages::{run, RunContext, Overrides, Stage};

/// Ultrafast Doppler tomography pipeline: synthetic acquisition,
/// reconstruction and vascular quantification, driven by one JSON config.
#[derive(Parser)]
#[command(name = "ufdt", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Pipeline configuration file (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Worker threads for the parallel sections; results do not depend on
    /// this.
    #[arg(long)]
    workers: Option<usize>,
    /// Override the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the configured random seed.
    #[arg(long)]
    seed_override: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the vessel phantom and its ground-truth records.
    Phantom(CommonArgs),
    /// Acquire the ultrafast frame stacks for every slice of the plan.
    Scan(CommonArgs),
    /// Clutter-filter, assemble, register, sum and deconvolve the volume.
    Reconstruct(CommonArgs),
    /// Threshold, skeletonize and measure the vessel network.
    Quantify(CommonArgs),
    /// Compute the contrast-perfusion parametric maps.
    Dceus(CommonArgs),
    /// Collate analytics and group statistics into the report table.
    Report(CommonArgs),
    /// Run every stage in order.
    All(CommonArgs),
    /// Run a stage named by --stage (alias for the direct subcommands).
    Run {
        #[command(flatten)]
        common: CommonArgs,
        /// phantom | scan | reconstruct | quantify | dceus | report | all
        #[arg(long)]
        stage: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (stage, common) = match cli.command {
        Command::Phantom(c) => (Stage::Phantom, c),
        Command::Scan(c) => (Stage::Scan, c),
        Command::Reconstruct(c) => (Stage::Reconstruct, c),
        Command::Quantify(c) => (Stage::Quantify, c),
        Command::Dceus(c) => (Stage::Dceus, c),
        Command::Report(c) => (Stage::Report, c),
        Command::All(c) => (Stage::All, c),
        Command::Run { common, stage } => match Stage::parse(&stage) {
            Some(s) => (s, common),
            None => {
                eprintln!("unknown stage '{stage}'");
                return ExitCode::from(2);
            }
        },
    };

    let config = match PipelineConfig::load(&common.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(2);
        }
    };
    let overrides = Overrides {
        out_dir: common.out,
        seed: common.seed_override,
        workers: common.workers,
        cache_dir: None,
    };
    let ctx = RunContext::new(config, &overrides);
    match run(stage, &ctx, common.workers) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("{failure}");
            ExitCode::from(failure.exit_code as u8)
        }
    }
}
