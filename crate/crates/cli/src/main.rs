//! `rashnet`: manifest ingestion, fold splitting, learning-rate sweeps,
//! cross-validated two-phase training, evaluation and prediction.

mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "rashnet", version, about = "Residual-network measles screening pipeline")]
struct Cli {
    /// Log progress at debug level
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate a manifest and print per-class counts
    Ingest(IngestArgs),
    /// Write a stratified fold plan as `sample_id,fold` CSV
    Split(SplitArgs),
    /// Sweep learning rates on the first fold and write `lr,loss_smoothed` CSV
    LrFind(LrFindArgs),
    /// Run the two-phase protocol on every fold; write checkpoints and reports
    Train(TrainArgs),
    /// Score a checkpoint on a manifest
    Evaluate(EvaluateArgs),
    /// Print `path,score` (positive-class probability) for each image
    Predict(PredictArgs),
    /// Run the protocol for several depths and tabulate average metrics
    CompareVariants(CompareArgs),
}

/// Settings shared by every command; each flag overrides the same key in
/// `--config`.
#[derive(Args, Debug, Default, Clone)]
pub struct RunFlags {
    /// `key = value` configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Manifest CSV with header `path,label`
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Network depth: 34, 50, 101 or 152
    #[arg(long)]
    variant: Option<u32>,
    /// Number of folds
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Epochs of head-only training
    #[arg(long)]
    epochs_head: Option<usize>,
    /// Epochs of whole-network fine-tuning (0 skips it)
    #[arg(long)]
    epochs_finetune: Option<usize>,
    /// Fine-tuning rate of the earliest layer group
    #[arg(long)]
    lr_lo: Option<f64>,
    /// Fine-tuning rate of the head
    #[arg(long)]
    lr_hi: Option<f64>,
    /// Head-only rate; a sweep on the first fold picks it when omitted
    #[arg(long)]
    lr_head: Option<f64>,
    /// Duplicate minority training samples until balanced
    #[arg(long)]
    oversample: bool,
    /// Random flips and rotations on training samples
    #[arg(long)]
    augment: bool,
    /// Floating-point width: 32 or 64
    #[arg(long)]
    precision: Option<u32>,
    /// Start from this checkpoint instead of random weights
    #[arg(long)]
    init_checkpoint: Option<PathBuf>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Positive call threshold on the positive-class probability
    #[arg(long)]
    threshold: Option<f64>,
    /// Input side length in pixels
    #[arg(long)]
    resolution: Option<usize>,
    /// Custom per-stage block counts, e.g. `1,1,1,1`
    #[arg(long)]
    blocks: Option<String>,
    /// Custom per-stage widths, e.g. `8,16,32,64`
    #[arg(long)]
    widths: Option<String>,
    /// Block kind for a custom layout: basic or bottleneck
    #[arg(long)]
    block: Option<String>,
    /// Steps of the learning-rate sweep
    #[arg(long)]
    lr_find_iterations: Option<usize>,
}

#[derive(Args, Debug)]
struct IngestArgs {
    #[command(flatten)]
    run: RunFlags,
    /// Also check that every image file exists
    #[arg(long)]
    check_files: bool,
}

#[derive(Args, Debug)]
struct SplitArgs {
    #[command(flatten)]
    run: RunFlags,
    /// Output CSV (stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct LrFindArgs {
    #[command(flatten)]
    run: RunFlags,
    /// Output CSV (stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    run: RunFlags,
    /// Directory for checkpoints, reports and logs
    #[arg(long)]
    out_dir: PathBuf,
    /// Use this fold plan instead of splitting with `--k`/`--seed`
    #[arg(long)]
    folds: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[command(flatten)]
    run: RunFlags,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Write the JSON report here as well
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// PNG or JPEG images
    #[arg(required = true)]
    images: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[command(flatten)]
    run: RunFlags,
    /// Depths to compare
    #[arg(long, value_delimiter = ',', default_value = "34,50,101,152")]
    variants: Vec<u32>,
    #[arg(long)]
    out_dir: PathBuf,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Ingest(a) => commands::ingest(&a.run, a.check_files),
        Command::Split(a) => commands::split(&a.run, a.out.as_deref()),
        Command::LrFind(a) => commands::lr_find(&a.run, a.out.as_deref()),
        Command::Train(a) => commands::train(&a.run, &a.out_dir, a.folds.as_deref()),
        Command::Evaluate(a) => commands::evaluate(&a.run, &a.checkpoint, a.out.as_deref()),
        Command::Predict(a) => commands::predict(&a.checkpoint, &a.images),
        Command::CompareVariants(a) => commands::compare_variants(&a.run, &a.variants, &a.out_dir),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.verbose { "debug" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
