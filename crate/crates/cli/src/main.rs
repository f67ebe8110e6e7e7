//! `vpe`: data generation, training and evaluation for the variational
//! prototyping-encoder.

mod commands;
mod config;
mod run_dir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vpe_core::Error as CoreError;

/// Bad flags, unknown config keys and similar caller mistakes.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(name = "vpe", version, about = "Variational prototyping-encoder toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic symbol benchmark.
    GenData(GenDataArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// One-shot nearest-prototype classification reports.
    EvalOneshot(EvalOneshotArgs),
    /// Prototype-to-real retrieval: AUC table, average images, heat map.
    EvalRetrieval(EvalRetrievalArgs),
    /// Grid of (input, decoded, true prototype) triplets.
    Reconstruct(ReconstructArgs),
    /// Latent means of every image and prototype as CSV.
    ExportEmbeddings(ExportArgs),
}

/// Options shared by every subcommand.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// `key = value` config file; flags and `VPE_*` variables override it.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Extra `key=value` setting; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Model preset: toy (16px), traffic (48px) or logo (64px).
    #[arg(long)]
    pub preset: Option<String>,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub unseen: Option<usize>,
    #[arg(long)]
    pub per_class: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    /// Fraction of each seen class held out as queries.
    #[arg(long)]
    pub held_out: Option<f64>,
    /// Ratio of the last class's image count to the first's.
    #[arg(long)]
    pub imbalance: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Reconstruct the input instead of the prototype.
    #[arg(long)]
    pub baseline_vae: bool,
    /// Disable paired rotation/flip augmentation.
    #[arg(long)]
    pub no_aug: bool,
    /// Evaluate held-out seen-class queries every N steps and keep the best checkpoint.
    #[arg(long)]
    pub validate_every: Option<u64>,
    /// Write the inputs and targets of the first batch as PNG grids to this directory.
    #[arg(long, value_name = "DIR")]
    pub dump_targets: Option<PathBuf>,
    /// Continue from a checkpoint.
    #[arg(long, value_name = "CHECKPOINT")]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalOneshotArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Protocols to run; defaults to all, unseen and mixed.
    #[arg(long = "protocol", value_name = "all|unseen|mixed|seen")]
    pub protocols: Vec<String>,
    /// Replace every query embedding with its class prototype's embedding.
    #[arg(long)]
    pub oracle: bool,
}

#[derive(Args, Debug)]
pub struct EvalRetrievalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Images averaged per query prototype.
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Classes to query: unseen or all.
    #[arg(long, default_value = "unseen")]
    pub scope: String,
    /// `class_name category` lines that color the heat-map bands.
    #[arg(long, value_name = "PATH")]
    pub categories: Option<PathBuf>,
    /// Replace every gallery embedding with its class prototype's embedding.
    #[arg(long)]
    pub oracle: bool,
}

#[derive(Args, Debug)]
pub struct ReconstructArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Triplet rows, split between seen and unseen classes.
    #[arg(long)]
    pub rows: Option<usize>,
    /// Nearest-neighbour upscaling of the saved grid.
    #[arg(long, default_value_t = 4)]
    pub scale: usize,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory; the CSV is written as `embeddings.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// 1: usage or config, 2: data, 3: numerical failure.
fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    match err.downcast_ref::<CoreError>() {
        Some(CoreError::NonFinite(_)) => 3,
        Some(CoreError::InvalidArgument(_)) => 1,
        Some(_) => 2,
        None => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::EvalOneshot(a) => commands::eval_oneshot(a),
        Command::EvalRetrieval(a) => commands::eval_retrieval(a),
        Command::Reconstruct(a) => commands::reconstruct(a),
        Command::ExportEmbeddings(a) => commands::export_embeddings(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
