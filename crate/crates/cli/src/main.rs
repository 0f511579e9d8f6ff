use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tracing_subscriber::EnvFilter;

mod commands;
mod config;
mod failure;

use config::RunConfig;
use failure::{user, Failure};

/// Paragraph-boundary activation analysis and transfer experiments.
#[derive(Parser)]
#[command(name = "seampatch", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads (default: one per core).
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Output directory, overriding `output_dir` in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Debug-level logging unless SEAMPATCH_LOG is set.
    #[arg(long, short, global = true)]
    verbose: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Attention heatmap and attention-output cosine matrices around the boundary.
    Analyze,
    /// Original, transferred and neutral generations for every context.
    Transfer,
    /// Embedding distances, summary table, t-test and 2-D projection.
    Evaluate,
    /// Markdown report from the evaluation and analysis outputs.
    Report,
}

fn run(cli: &Cli) -> Result<(), Failure> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(user(anyhow::anyhow!("--workers must be at least 1")));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(failure::internal)?;
    }
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| user(anyhow::anyhow!("--config is required")))?;
    let cfg = RunConfig::load(path, cli.out.as_deref()).map_err(user)?;
    match cli.command {
        Command::Analyze => commands::analyze(&cfg),
        Command::Transfer => commands::transfer(&cfg),
        Command::Evaluate => commands::evaluate(&cfg),
        Command::Report => commands::report(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let default = if cli.verbose { "debug" } else { "info" };
    let filter =
        EnvFilter::try_from_env("SEAMPATCH_LOG").unwrap_or_else(|_| EnvFilter::new(default));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.exit_code())
        }
    }
}
