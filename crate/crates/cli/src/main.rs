use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use skip2lora::data::LabelColumn;
use skip2lora::trainer::{Sampler, DEFAULT_BATCH_SIZE, DEFAULT_EPOCHS, DEFAULT_LEARNING_RATE};
use skip2lora::FineTuneMode;

mod commands;
mod error;
mod sidecar;

use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "skip2lora", version, about = "LoRA and Skip2-LoRA fine-tuning of small MLPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write pretrain/finetune/test CSVs of the synthetic drift task.
    GenData(GenDataArgs),
    /// Train a fresh network on a dataset and write a checkpoint.
    Pretrain(PretrainArgs),
    /// Fine-tune a checkpoint with one of the eight methods.
    Finetune(FinetuneArgs),
    /// Report the accuracy of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Time and count the cost of several fine-tuning methods side by side.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Samples in each of the three splits.
    #[arg(long, default_value_t = 470)]
    samples: usize,
    #[arg(long, default_value_t = 256)]
    features: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 8.0)]
    separation: f32,
    #[arg(long, default_value_t = 1.0)]
    noise: f32,
    /// How far each class center moves under drift.
    #[arg(long, default_value_t = 8.0)]
    drift_shift: f32,
    /// Noise multiplier after drift.
    #[arg(long, default_value_t = 1.5)]
    drift_noise: f32,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// CSV dataset.
    #[arg(long)]
    data: PathBuf,
    /// `last`, a zero-based column index, or a header name.
    #[arg(long, default_value = "last")]
    label_column: LabelColumn,
}

#[derive(Debug, Args)]
struct LoopArgs {
    #[arg(long, default_value_t = DEFAULT_EPOCHS)]
    epochs: usize,
    #[arg(long, default_value_t = DEFAULT_BATCH_SIZE)]
    batch_size: usize,
    #[arg(long = "lr", default_value_t = DEFAULT_LEARNING_RATE)]
    learning_rate: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = SamplerArg::WithReplacement)]
    sampler: SamplerArg,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SamplerArg {
    WithReplacement,
    ShuffledEpoch,
}

impl From<SamplerArg> for Sampler {
    fn from(s: SamplerArg) -> Self {
        match s {
            SamplerArg::WithReplacement => Sampler::WithReplacement,
            SamplerArg::ShuffledEpoch => Sampler::ShuffledEpoch,
        }
    }
}

#[derive(Debug, Args)]
struct PretrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Hidden layer widths.
    #[arg(long, value_delimiter = ',', default_value = "96,96")]
    hidden: Vec<usize>,
    #[command(flatten)]
    train: LoopArgs,
    /// Use raw features instead of standardising them.
    #[arg(long)]
    no_normalize: bool,
}

#[derive(Debug, Args)]
struct FinetuneArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Input checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    mode: FineTuneMode,
    #[arg(long, default_value_t = skip2lora::network::DEFAULT_RANK)]
    rank: usize,
    #[command(flatten)]
    train: LoopArgs,
    /// Disable the activation cache (Skip2-LoRA only).
    #[arg(long)]
    no_cache: bool,
    /// Per-batch metrics CSV.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Also write a JSON report here.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Pre-trained checkpoint every mode starts from.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "lora-all,skip-lora,skip2-lora")]
    modes: Vec<FineTuneMode>,
    /// Mode the reduction columns compare against.
    #[arg(long, default_value = "lora-all")]
    baseline: FineTuneMode,
    #[arg(long, default_value_t = skip2lora::network::DEFAULT_RANK)]
    rank: usize,
    #[command(flatten)]
    train: LoopArgs,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Pretrain(a) => commands::pretrain(a),
        Command::Finetune(a) => commands::finetune(a),
        Command::Eval(a) => commands::eval(a),
        Command::Bench(a) => commands::bench(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
