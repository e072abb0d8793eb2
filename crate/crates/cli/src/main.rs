mod artifacts;
mod commands;
mod config;
mod report;

use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Parser, Subcommand};

use commands::{Ctx, SynthArgs};
use config::RunConfig;

/// Outcome prediction for event logs with graph convolutional networks.
#[derive(Parser)]
#[command(name = "hypergcn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Root seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Split the dataset and fit encoder, edge scaler and duration binning.
    Prepare {
        #[arg(long)]
        config: PathBuf,
    },
    /// Tune every configured model, then retrain each winner.
    Tune {
        #[arg(long)]
        config: PathBuf,
        /// Trials run concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Train one model from a hyperparameter JSON file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        hp: PathBuf,
    },
    /// Score a checkpoint on the validation split or on another dataset.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// CSV to score instead of the validation split.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Classification-report tables from metrics JSON files and trial ledgers.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Generate a synthetic event log and a matching config.
    Synth {
        /// `balanced` or `imbalanced`.
        #[arg(long)]
        kind: String,
        /// Cases per class (balanced) or in total (imbalanced).
        #[arg(long, default_value_t = 200)]
        n: usize,
        /// Number of classes (balanced only).
        #[arg(long, default_value_t = 3)]
        classes: usize,
        /// Comma-separated class ratios (imbalanced only).
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<f64>>,
    },
}

fn context(cli: &Cli, config: &Path, jobs: usize) -> anyhow::Result<Ctx> {
    let mut config = RunConfig::load(config)?;
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    let out = cli.out.clone().unwrap_or_else(|| config.out_dir.clone());
    if jobs == 0 {
        anyhow::bail!("--jobs must be at least 1");
    }
    Ok(Ctx { config, out, jobs })
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Prepare { config } => commands::prepare(&context(cli, config, 1)?),
        Command::Tune { config, jobs } => commands::tune(&context(cli, config, *jobs)?),
        Command::Train { config, hp } => commands::train_hp(&context(cli, config, 1)?, hp),
        Command::Evaluate { config, checkpoint, dataset } => {
            commands::evaluate_checkpoint(&context(cli, config, 1)?, checkpoint, dataset.as_deref())
        }
        Command::Report { inputs } => {
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("out").join("report"));
            commands::report(inputs, &out)
        }
        Command::Synth { kind, n, classes, ratios } => {
            let out = cli.out.clone().context("synth needs --out <dir>")?;
            let args = SynthArgs { kind: kind.clone(), n: *n, classes: *classes, ratios: ratios.clone(), seed: cli.seed.unwrap_or(0) };
            commands::synth(&args, &out)
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
