mod commands;
mod output;
mod visualize;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "steve", version, about = "Object-centric video learning with slot transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic video dataset.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = ["train", "iid", "ood-count", "ood-texture"])]
        split: String,
        #[arg(long, default_value_t = 100)]
        num_clips: usize,
        #[arg(long)]
        force: bool,
    },
    /// Train a model on a dataset.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `train.steps`.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        force: bool,
    },
    /// Score a checkpoint with FG-ARI.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report JSON path; an aggregate CSV and a config echo are written beside it.
        #[arg(long)]
        report: PathBuf,
        /// Also run the past-frame and video-length sweeps into this file.
        #[arg(long)]
        sweeps: Option<PathBuf>,
        /// Evaluate with extra slots (out-of-distribution protocol). `auto`
        /// uses the gap between the dataset's and the training object count.
        #[arg(long)]
        extra_slots: Option<String>,
        #[arg(long)]
        force: bool,
    },
    /// Train a mixture decoder on frozen slots and compare its masks with attention.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `train.diagnostic_steps`.
        #[arg(long)]
        steps: Option<usize>,
        /// Clips scored after training (default: all).
        #[arg(long)]
        eval_clips: Option<usize>,
        #[arg(long)]
        force: bool,
    },
    /// Render segmentation strips and sweep plots.
    Visualize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Diagnostic checkpoint for the decoding-mask row.
        #[arg(long)]
        diagnostic: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        clips: usize,
        #[arg(long, default_value_t = 6)]
        frames: usize,
        /// Clips used for the sweep plots; 0 skips them.
        #[arg(long, default_value_t = 8)]
        plot_clips: usize,
        #[arg(long, default_value_t = 2)]
        scale: u32,
        #[arg(long)]
        force: bool,
    },
    /// Seeded comparison of STEVE patch sizes and the mixture baseline.
    Experiment {
        /// Experiment config JSON; defaults to the built-in desk setting.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        force: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
