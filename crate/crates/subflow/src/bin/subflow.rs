//! Pipeline CLI: each subcommand reads one JSON config and writes
//! deterministic artifacts under the output directory.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use subflow::pipeline::{self, PipelineConfig};
use subflow::SubflowError;

/// Output root override; precedence is `--out` > `SUBFLOW_OUT` > config.
const OUT_ENV: &str = "SUBFLOW_OUT";

#[derive(Parser)]
#[command(name = "subflow", version, about = "Subclass-conditional flow-matching pipeline")]
struct Cli {
    /// JSON pipeline config; omit to use the built-in default benchmark.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed override; all stage seeds derive from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory override.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw the benchmark dataset and write tier/target metadata.
    Generate,
    /// Fit per-class mixtures and append subclass assignments.
    FitSubclasses,
    /// Learn per-subclass source distributions.
    OptimizeSources,
    /// Train the velocity field.
    Train,
    /// Synthesize augmentation rows (and optional scatter plots).
    Sample {
        /// Emit per-class SVG scatter plots of real vs synthetic rows.
        #[arg(long)]
        plots: bool,
    },
    /// Score generation fidelity, mode recall, downstream accuracy, purity.
    Evaluate,
    /// All stages in order.
    RunAll {
        #[arg(long)]
        plots: bool,
    },
    /// Run the four-cell {±subclass, ±source optimization} grid.
    Ablate {
        /// Generative seeds per cell.
        #[arg(long, default_value_t = 3)]
        seeds: usize,
    },
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, SubflowError> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::from_json_file(path)?,
        None => pipeline::default_config(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.out_dir = out.clone();
    } else if let Ok(out) = std::env::var(OUT_ENV) {
        config.out_dir = PathBuf::from(out);
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: &Cli) -> Result<(), SubflowError> {
    let config = load_config(cli)?;
    match &cli.command {
        Command::Generate => pipeline::cmd_generate(&config),
        Command::FitSubclasses => pipeline::cmd_fit_subclasses(&config),
        Command::OptimizeSources => pipeline::cmd_optimize_sources(&config),
        Command::Train => pipeline::cmd_train(&config),
        Command::Sample { plots } => pipeline::cmd_sample(&config, *plots),
        Command::Evaluate => pipeline::cmd_evaluate(&config),
        Command::RunAll { plots } => pipeline::cmd_run_all(&config, *plots),
        Command::Ablate { seeds } => pipeline::cmd_ablate(&config, *seeds),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err @ SubflowError::Config(_)) => {
            eprintln!("config error: {err}");
            ExitCode::from(2)
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}
