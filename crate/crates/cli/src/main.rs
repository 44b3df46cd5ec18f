//! `crackseg` command-line tool.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crackseg::Error;

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  unexpected failure
  2  invalid command line
  3  invalid configuration
  4  data error (missing/unreadable images or masks, mismatched inputs)
  5  non-finite loss or gradient during training
  6  unreadable or incompatible checkpoint

Environment:
  CRACKSEG_OUTPUT_DIR  overrides output_dir of the run configuration";

#[derive(Debug, Parser)]
#[command(name = "crackseg", version, about = "Self-supervised crack segmentation", after_help = EXIT_CODES)]
struct Cli {
    /// Print every configuration key with its default and documentation, then exit.
    #[arg(long)]
    print_config: bool,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model without masks; writes checkpoints, a JSON-lines log and summary.json.
    Train(TrainArgs),
    /// Score a checkpoint against reference masks; writes metrics.csv and metrics_summary.json.
    Eval(EvalArgs),
    /// Write one binary mask PNG (0/255) per input image.
    Infer(InferArgs),
    /// Write predicted masks and per-scale attention overlays at the original image size.
    ExportAttention(ExportArgs),
    /// Paired t-test between two sets of per-dataset scores.
    Compare(CompareArgs),
    /// Generate the synthetic crack corpus (images/ and masks/).
    GenSynthetic(SynthArgs),
    /// Same as --print-config.
    PrintConfig,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override data.root.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Override output_dir.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Override train.max_epochs.
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Override model.variant (full, v0, v1, v2, v3, baseline-off).
    #[arg(long)]
    variant: Option<crackseg::Variant>,
    /// Override train.seed and model.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override train.batch_size.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Override data.resize.
    #[arg(long, num_args = 2, value_names = ["H", "W"])]
    resize: Option<Vec<usize>>,
    /// Continue from this checkpoint (normally <output_dir>/last.ckpt).
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Print the effective configuration and exit without training.
    #[arg(long)]
    print_config: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset root holding images/ and masks/.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "images")]
    image_dir: String,
    #[arg(long, default_value = "masks")]
    mask_dir: String,
    /// Working resolution; defaults to the checkpoint's training resolution.
    #[arg(long, num_args = 2, value_names = ["H", "W"])]
    resize: Option<Vec<usize>>,
    /// Output directory for metrics.csv and metrics_summary.json.
    #[arg(long)]
    out: PathBuf,
    /// Also record the mean scores under KEY in this JSON file (input for `compare`).
    #[arg(long, requires = "key")]
    append_to: Option<PathBuf>,
    /// Dataset key used with --append-to.
    #[arg(long)]
    key: Option<String>,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Image files or directories.
    #[arg(long, required = true, num_args = 1..)]
    input: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, num_args = 2, value_names = ["H", "W"])]
    resize: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, required = true, num_args = 1..)]
    input: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, num_args = 2, value_names = ["H", "W"])]
    resize: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
struct CompareArgs {
    /// Scores of method A: JSON object {dataset: {metric: value}}.
    a: PathBuf,
    /// Scores of method B, same datasets.
    b: PathBuf,
    /// Metrics to test; defaults to every metric present for all datasets.
    #[arg(long)]
    metric: Vec<String>,
    /// Write the report as JSON here as well.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    count: usize,
    #[arg(long, num_args = 2, value_names = ["H", "W"], default_values_t = [256, 256])]
    size: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    strokes_min: usize,
    #[arg(long, default_value_t = 3)]
    strokes_max: usize,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => 3,
        Some(Error::Data(_) | Error::Io { .. } | Error::Image { .. } | Error::Metric(_) | Error::Stats(_)) => 4,
        Some(Error::NonFinite(_)) => 5,
        Some(Error::Checkpoint(_)) => 6,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        _ if cli.print_config => commands::print_config(),
        None | Some(Command::PrintConfig) => {
            if cli.command.is_none() {
                eprintln!("no subcommand given; see `crackseg --help`");
                return ExitCode::from(2);
            }
            commands::print_config()
        }
        Some(Command::Train(a)) => commands::train(a),
        Some(Command::Eval(a)) => commands::eval(a),
        Some(Command::Infer(a)) => commands::infer(a),
        Some(Command::ExportAttention(a)) => commands::export(a),
        Some(Command::Compare(a)) => commands::compare(a),
        Some(Command::GenSynthetic(a)) => commands::gen_synthetic(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
