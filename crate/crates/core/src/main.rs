use clap::Parser;
use esoafl::config::{ExperimentConfig, TaskKind};
use esoafl::runner::{self, RunOptions};
use std::path::PathBuf;
use std::process::ExitCode;

/// Simulator for energy- and spectrum-efficient federated learning with
/// multi-bit over-the-air aggregation.
#[derive(Debug, Parser)]
#[command(name = "esoafl", version, about)]
struct Cli {
    /// Experiment configuration (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override the root seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Override the task: train | sweep | fit | jcp | phy-check.
    #[arg(long)]
    task: Option<TaskKind>,

    /// Worker threads for parallel sweep cells (default: all cores).
    #[arg(long)]
    threads: Option<usize>,

    /// Write received constellation samples (symbol mode) to this CSV.
    #[arg(long)]
    constellation: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("finished with non-converged results");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> esoafl::Result<bool> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| esoafl::Error::Parse(e.to_string()))?;
    }

    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.out_dir = out;
    }
    if let Some(task) = cli.task {
        cfg.task = task;
    }
    cfg.validate()?;

    let report = runner::run(
        &cfg,
        &RunOptions {
            constellation_csv: cli.constellation,
        },
    )?;
    for artifact in &report.artifacts {
        println!("wrote {}", artifact.display());
    }
    Ok(report.all_converged)
}
