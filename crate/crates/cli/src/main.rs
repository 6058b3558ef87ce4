//! `mamba-cnn` command-line front end.
//!
//! Exit codes: 0 success, 1 usage or configuration error (including
//! unreadable checkpoints), 2 data error, 3 numeric abort or failed
//! gradient check.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mamba_cnn::ErrorClass;

#[derive(Debug, Parser)]
#[command(name = "mamba-cnn", version, about = "Train and evaluate gated CNN beauty-score regressors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one model and write checkpoints, history and a validation report.
    Train(TrainArgs),
    /// Score a checkpoint against labelled data.
    Eval(EvalArgs),
    /// Train several ablation variants on identical data and compare them.
    Ablate(AblateArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic face dataset with its generator manifest.
    Synth(SynthArgs),
    /// Predict the score of one PPM image.
    Predict(PredictArgs),
    /// Print a run config in canonical form.
    Config(ConfigArgs),
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Image directory.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Labels CSV (default: DIR/labels.csv).
    #[arg(long, value_name = "CSV", requires = "data")]
    labels: Option<PathBuf>,
    /// Use N generated faces instead of files.
    #[arg(long, value_name = "N", conflicts_with_all = ["data", "labels"])]
    synthetic: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    /// Output directory (default: the config's out_dir, then ./mamba-cnn-out).
    #[arg(long, value_name = "DIR", env = "MAMBA_CNN_OUT")]
    out: Option<PathBuf>,
    /// Overrides train.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from a `last.mckp` written by an earlier run.
    #[arg(long, value_name = "PATH")]
    resume: Option<PathBuf>,
    /// Pause after this many completed epochs, leaving `last.mckp` behind.
    #[arg(long, value_name = "EPOCHS")]
    until: Option<usize>,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    #[arg(long, value_name = "DIR", conflicts_with = "synthetic_manifest")]
    data: Option<PathBuf>,
    #[arg(long, value_name = "CSV", requires = "data")]
    labels: Option<PathBuf>,
    /// Manifest written by `synth` (or its directory).
    #[arg(long, value_name = "PATH")]
    synthetic_manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Comma-separated variant labels.
    #[arg(long, default_value = "A,B,C,D")]
    variants: String,
    #[command(flatten)]
    data: DataArgs,
    /// Overrides train.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Also write per-variant histories and `ablation.csv` here.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// layers, block, tiny, or tiny-A..tiny-D.
    #[arg(long, default_value = "tiny")]
    preset: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 48)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_name = "DIR", env = "MAMBA_CNN_OUT")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    #[arg(long, value_name = "PPM")]
    image: PathBuf,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Built-in starting point: default or tiny.
    #[arg(long, default_value = "default", conflicts_with = "file")]
    preset: String,
    /// Validate this file and print its canonical form instead.
    #[arg(value_name = "PATH")]
    file: Option<PathBuf>,
}

/// A failure with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }
}

impl From<mamba_cnn::Error> for Failure {
    fn from(e: mamba_cnn::Error) -> Self {
        let code = match e.class() {
            ErrorClass::Config => 1,
            ErrorClass::Data => 2,
            ErrorClass::Numeric => 3,
        };
        Self { code, message: e.to_string() }
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
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Synth(a) => commands::synth(a),
        Command::Predict(a) => commands::predict(a),
        Command::Config(a) => commands::config(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
