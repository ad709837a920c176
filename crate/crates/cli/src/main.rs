//! `stillframe`: dataset generation, training, inference and evaluation of
//! dynamic-object removal models.

mod commands;
mod config;
mod failure;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "stillframe", version, about = "Remove dynamic objects from street images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command that reads a run configuration.
#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted-key override, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory; `runs_dir/name` from the config by default.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a paired synthetic dataset.
    Generate {
        #[arg(long)]
        out: PathBuf,
        /// Samples per split.
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// `S` for SxS or `HxW`.
        #[arg(long, default_value = "64")]
        size: String,
        /// Split to generate. Repeatable; `train` when absent.
        #[arg(long = "split")]
        splits: Vec<String>,
        /// TOML file with generation parameters.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Generation parameter override, e.g. `--set shadow_probability=0.5`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Train a model; checkpoints and a training report go to the run directory.
    Train {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Remove dynamic objects from PNG images.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// PNG file or directory of PNGs.
        #[arg(long)]
        input: PathBuf,
        /// Mask PNG or directory of masks named like the inputs. The
        /// segmentation branch predicts masks when absent.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
    },
    /// Score a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Split to score; `eval.split` from the config by default.
        #[arg(long)]
        split: Option<String>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train and score every ablation variant with the same seed.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Compare the model with classical baselines on the same masks.
    Compare {
        /// Missing or unreadable checkpoints are reported as skipped.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        split: Option<String>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Descriptor distances between places before and after object removal.
    Pilot {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset whose generation parameters the pilot scenes reuse.
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Per-frame timing of segmentation and inpainting.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset whose generation parameters the frames reuse.
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {failure}");
            ExitCode::from(failure.code() as u8)
        }
    }
}
