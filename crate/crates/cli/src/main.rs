use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

/// Part-aware occlusion augmentation pipeline.
///
/// Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
#[derive(Parser, Debug)]
#[command(name = "occaug", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the procedural three-class shapes dataset.
    MakeToy(MakeToyArgs),
    /// Validate annotations and write one occlusion plan per image.
    Prepare(PrepareArgs),
    /// Populate the augmented-image cache for one method.
    Augment(AugmentArgs),
    /// Train a classifier and write a checkpoint directory.
    Train(TrainArgs),
    /// Score a checkpoint under simulated occlusion and on a folder dataset.
    Eval(EvalArgs),
    /// Serve the mock generative backend over TCP.
    ServeBackend(ServeArgs),
    /// Serve the mock generative backend over stdin/stdout.
    #[command(hide = true)]
    BackendWorker,
}

#[derive(Args, Debug)]
pub struct MakeToyArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub train_per_class: usize,
    #[arg(long, default_value_t = 30)]
    pub test_per_class: usize,
}

#[derive(Args, Debug)]
pub struct PrepareArgs {
    /// COCO-style annotation file.
    #[arg(long)]
    pub annotations: PathBuf,
    /// Output directory for `plans/` and `report.json`.
    #[arg(long)]
    pub out: PathBuf,
    /// Trim overlapping parts instead of rejecting the file.
    #[arg(long)]
    pub lenient: bool,
}

#[derive(Args, Debug)]
pub struct AugmentArgs {
    #[arg(long)]
    pub annotations: PathBuf,
    /// Image root; defaults to the annotation file's directory.
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// Plan directory written by `prepare`; plans are recomputed when absent.
    #[arg(long)]
    pub plans: Option<PathBuf>,
    #[arg(long)]
    pub method: String,
    /// mock, local, local:<cmd>, or remote:<host:port>.
    #[arg(long, default_value = "mock")]
    pub backend: String,
    #[arg(long, env = "OCCAUG_CACHE", default_value = ".occaug-cache")]
    pub cache: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub steps: u32,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Augmentation method, or `none`.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub backend: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, env = "OCCAUG_CACHE")]
    pub cache: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    /// Folder dataset laid out as `<class_name>/<image>.png`.
    #[arg(long)]
    pub folder: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Row label in the report.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub backend: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:7878")]
    pub listen: String,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::MakeToy(a) => commands::make_toy(&a),
        Command::Prepare(a) => commands::prepare(&a),
        Command::Augment(a) => commands::augment(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::ServeBackend(a) => commands::serve_backend(&a),
        Command::BackendWorker => commands::backend_worker(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
