//! Command-line front end for the hemorrhage-detection pipeline.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hemoscan::commands;
use hemoscan::config::PipelineConfig;

#[derive(Parser)]
#[command(name = "hemoscan", version, about = "CT hemorrhage detection pipeline")]
struct Cli {
    /// Pipeline configuration (TOML; an empty file selects every default).
    #[arg(long)]
    config: PathBuf,

    /// Override the stage seed from the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the artifact directory from the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic CT dataset with labels and split sidecars.
    Synth {
        /// Number of scans (defaults to the configured count).
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train the slice encoder on the train split.
    TrainCnn,
    /// Run the trained encoder over every scan and store slice features.
    Extract,
    /// Fit the feature selector on training-split features.
    FitSelector,
    /// Train the scan-sequence model on selected features.
    TrainLstm,
    /// Write slice-level predictions for the dataset.
    Predict {
        /// Restrict to one split (train, val, or test).
        #[arg(long)]
        split: Option<String>,
    },
    /// Score a prediction table against the dataset labels.
    Evaluate {
        /// Prediction CSV (defaults to the artifact directory's table).
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Render heatmap overlays for one scan.
    Gradcam {
        /// Scan id, e.g. scan0003.
        #[arg(long)]
        scan: String,
        /// Classes to render (0 = any); defaults to each slice's labels.
        #[arg(long, value_delimiter = ',')]
        classes: Option<Vec<usize>>,
    },
}

fn run(cli: Cli) -> hemoscan::Result<()> {
    let mut config = PipelineConfig::load(&cli.config)?;
    if let Some(out) = cli.out {
        config.data.out_dir = out;
    }
    match cli.command {
        Command::Synth { n } => {
            commands::cmd_synth(&config, n, cli.seed)?;
        }
        Command::TrainCnn => {
            commands::cmd_train_cnn(&config, cli.seed)?;
        }
        Command::Extract => {
            commands::cmd_extract(&config)?;
        }
        Command::FitSelector => {
            commands::cmd_fit_selector(&config)?;
        }
        Command::TrainLstm => {
            commands::cmd_train_lstm(&config, cli.seed)?;
        }
        Command::Predict { split } => {
            commands::cmd_predict(&config, split.as_deref())?;
        }
        Command::Evaluate { predictions } => {
            commands::cmd_evaluate(&config, predictions.as_deref())?;
        }
        Command::Gradcam { scan, classes } => {
            commands::cmd_gradcam(&config, &scan, classes.as_deref())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
