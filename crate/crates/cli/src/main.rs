mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Variable-size ViT segmentation: data generation, training, evaluation,
/// ablations, cost sweeps and gradient checks.
#[derive(Parser, Debug)]
#[command(name = "gsam", version)]
struct Cli {
    /// Run every kernel on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic shapes dataset as PNG pairs plus a manifest.
    Gen(GenArgs),
    /// Train a model, validating at full image size.
    Train(TrainArgs),
    /// Per-class IoU and mIoU of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Per-layer MACs for one input size.
    Macs(MacsArgs),
    /// Total MACs over a list of input sizes.
    Sweep(SweepArgs),
    /// Finite-difference check of every layer's gradients.
    Gradcheck(GradcheckArgs),
    /// Train every adapter ablation variant and tabulate the results.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub n: u64,
    #[arg(long, value_parser = commands::parse_size, default_value = "128x128")]
    pub size: (usize, usize),
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Flags shared by `train` and `ablate`; each overrides the config file.
#[derive(Args, Debug, Default)]
pub struct TrainOverrides {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub val_data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Random crop size for training, e.g. 64x64.
    #[arg(long, value_parser = commands::parse_size)]
    pub crop: Option<(usize, usize)>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub patch_size: Option<usize>,
    /// Pad before cropping (reflection for images, edge replication for labels).
    #[arg(long)]
    pub pad_before_crop: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: TrainOverrides,
    /// Adapter ablation variant key (adaptformer, no_conv, no_dilated, ..., full).
    #[arg(long)]
    pub adapter_variant: Option<String>,
    /// Continue from a resumable checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many epochs (the schedule still spans all epochs).
    #[arg(long)]
    pub stop_after: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Also write the JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Args, Debug)]
pub struct MacsArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = commands::parse_size, default_value = "128x128")]
    pub size: (usize, usize),
    #[arg(long, value_enum, default_value = "json")]
    pub format: Format,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated sizes; `64` means 64x64.
    #[arg(long, value_parser = commands::parse_size, value_delimiter = ',', default_value = "32,64,128,256")]
    pub sizes: Vec<(usize, usize)>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Elements checked per tensor; 0 checks all of them.
    #[arg(long, default_value_t = 24)]
    pub max_elements: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: TrainOverrides,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let exec = if cli.sequential {
        gsam::Exec::Sequential
    } else {
        gsam::Exec::default()
    };
    let result = match cli.command {
        Command::Gen(a) => commands::gen(&a),
        Command::Train(a) => commands::train(&a, exec),
        Command::Eval(a) => commands::eval(&a, exec),
        Command::Macs(a) => commands::macs(&a),
        Command::Sweep(a) => commands::sweep(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::Ablate(a) => commands::ablate(&a, exec),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<commands::UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
