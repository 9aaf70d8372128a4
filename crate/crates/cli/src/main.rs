//! `vmsrom`: run the FOM → POD → operators → closure → sweep → report
//! pipeline from an INI config, caching every stage by content hash.

mod config;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use config::PipelineConfig;
use pipeline::{Options, Pipeline, StageName};

#[derive(Parser)]
#[command(name = "vmsrom", version, about = "Data-driven VMS reduced order models for 1D Burgers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full-order model and store snapshots.
    Fom(Common),
    /// Compute the POD basis on the training window.
    Pod(Common),
    /// Assemble the Galerkin operators.
    Operators(Common),
    /// Build closure targets and the data-matrix SVD for every r.
    Train(Common),
    /// Sweep 2S/3S truncations and keep the optimal closures.
    Sweep(Common),
    /// Integrate G-ROM, 2S and 3S on the test window.
    Integrate(Common),
    /// Write the comparison table with provenance.
    Report(Common),
    /// Run every stage, or up to `--stage`.
    Pipeline {
        #[command(flatten)]
        common: Common,
        /// Last stage to run.
        #[arg(long, value_parser = parse_stage, default_value = "report")]
        stage: StageName,
    },
}

#[derive(Args, Clone)]
struct Common {
    /// Pipeline config file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Recompute stages even when cached.
    #[arg(long)]
    force: bool,
    /// Worker threads for sweeps and assembly (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Suppress progress messages.
    #[arg(long, short)]
    quiet: bool,
}

fn parse_stage(s: &str) -> Result<StageName, String> {
    StageName::parse(s).ok_or_else(|| {
        let names: Vec<_> = StageName::ALL.iter().map(|s| s.name()).collect();
        format!("unknown stage {s:?}; expected one of {}", names.join(", "))
    })
}

fn run(cli: Cli) -> Result<()> {
    let (common, last) = match cli.command {
        Command::Fom(c) => (c, StageName::Fom),
        Command::Pod(c) => (c, StageName::Pod),
        Command::Operators(c) => (c, StageName::Operators),
        Command::Train(c) => (c, StageName::Train),
        Command::Sweep(c) => (c, StageName::Sweep),
        Command::Integrate(c) => (c, StageName::Integrate),
        Command::Report(c) => (c, StageName::Report),
        Command::Pipeline { common, stage } => (common, stage),
    };
    if let Some(jobs) = common.jobs {
        anyhow::ensure!(jobs > 0, "--jobs must be at least 1");
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .context("cannot configure the worker pool")?;
    }
    let config = PipelineConfig::load(&common.config)?;
    let out = common
        .out
        .or_else(|| config.output.clone())
        .unwrap_or_else(|| PathBuf::from("results"));
    let cache = std::env::var_os("ROM_CACHE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| out.join(".cache"));
    let mut pipeline = Pipeline::new(
        config,
        Options {
            out,
            cache,
            force: common.force,
            quiet: common.quiet,
        },
    )?;
    pipeline.run(last)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
