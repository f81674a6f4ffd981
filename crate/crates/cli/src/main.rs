//! `capsaudio` command-line runner.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use capsaudio::analysis::AugmentKind;
use capsaudio::training::GridAxis;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "capsaudio", version, about = "Capsule-network audio classification experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Run configuration flags shared by `train` and `grid`.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// `key=value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override applied after the config file, e.g. `--set routing_iters=1`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

/// Output directory flags.
#[derive(Args, Debug, Clone)]
pub struct OutArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Replace an existing, non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Default)]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Extract MFCC features into cache files and a manifest pointing at them.
    Features {
        /// Dataset manifest (`path,labels[,split]`).
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Train a model; writes config.txt, metrics.csv and model.ckpt.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
        #[arg(long, value_enum, default_value_t)]
        precision: Precision,
    },
    /// Evaluate a checkpoint on one split of a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Optional directory for predictions.csv.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Sweep one axis (routing, caps_dim, regularization) over repeated seeds.
    Grid {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        axis: GridAxis,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        /// Concurrent training runs.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
        #[arg(long, value_enum, default_value_t)]
        precision: Precision,
    },
    /// Finite-difference gradient checks for every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Optional directory for gradcheck.csv.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// PCA of one class capsule over augmented copies of a split.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Class whose capsule is analysed.
        #[arg(long = "class")]
        class: String,
        #[arg(long, default_value = "amplitude")]
        kind: AugmentKind,
        /// Comma-separated levels; defaults depend on the kind.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        levels: Option<Vec<f64>>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Append capsule outputs to cached features for a downstream model.
    Transfer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Manifest whose entries are `.feat` caches or audio files.
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Build a multi-label corpus by concatenating pairs of clips.
    SynthMultilabel {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Write the synthetic spoken-digit corpus.
    SynthDigits {
        /// Clips per digit and speaker.
        #[arg(long, default_value_t = 10)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        out: OutArgs,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::dispatch(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("capsaudio: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
