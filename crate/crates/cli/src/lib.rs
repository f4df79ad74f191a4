//! Command-line front end: dataset synthesis, training, dehazing,
//! evaluation and the gradient-check suite.
//!
//! Every command writes a `manifest.tsv` next to its outputs recording the
//! resolved configuration, seed, artifacts and wall-clock time.

pub mod gradcheck;
mod manifest;
mod parallel;

mod dehaze;
mod eval;
mod synth;
pub mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

pub use manifest::RunManifest;
pub use parallel::{parallel_map, thread_count};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Haze(#[from] ids_core::hazegen::HazeError),
    #[error(transparent)]
    Train(#[from] ids_core::trainer::TrainError),
    #[error(transparent)]
    Checkpoint(#[from] ids_core::trainer::CheckpointError),
    #[error(transparent)]
    Dcp(#[from] ids_core::dcp::DcpError),
    #[error(transparent)]
    Image(#[from] ids_core::io::ImageIoError),
    #[error(transparent)]
    Tensor(#[from] ids_core::tensor::TensorError),
    #[error(transparent)]
    Report(#[from] ids_core::metrics::ReportError),
    #[error("{stage}: {path}: {source}")]
    Io {
        stage: &'static str,
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("gradient check failed for {0}")]
    GradCheck(String),
}

pub(crate) fn io_err(stage: &'static str, path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
    let path = path.into();
    move |source| CliError::Io { stage, path, source }
}

#[derive(Debug, Parser)]
#[command(name = "ids", version, about = "Multi-scale iterative dehazing: synthesis, training, inference, evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Ids,
    Dcp,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic clear/hazy pairs split 80/20 into train/ and val/.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        /// Image size as H,W.
        #[arg(long, default_value = "48,48")]
        size: String,
        #[arg(long, default_value = "indoor")]
        profile: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model on a synthesized dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        scheme: Option<String>,
        /// desk, shadow, medium, deep or paper.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Flat key=value file; flags override it, it overrides the preset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        patch: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Dehaze one PNG or every PNG in a directory.
    Dehaze {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "ids")]
        method: Method,
    },
    /// PSNR/SSIM of predictions against ground truth, written to eval.tsv.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Directory for eval.tsv and the manifest (defaults to --pred).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable op and loss.
    Gradcheck {
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Deliberately corrupt an op's backward pass (suite self-test).
        #[arg(long, hide = true)]
        inject_fault: Option<gradcheck::Fault>,
    },
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth {
            out,
            count,
            size,
            profile,
            seed,
        } => synth::run(&out, count, &size, &profile, seed),
        Command::Train {
            data,
            scheme,
            preset,
            out,
            seed,
            config,
            epochs,
            batch_size,
            patch,
            lr,
            resume,
        } => train::run(train::TrainArgs {
            data,
            scheme,
            preset,
            out,
            seed,
            config,
            epochs,
            batch_size,
            patch,
            lr,
            resume,
        }),
        Command::Dehaze {
            ckpt,
            input,
            out,
            method,
        } => dehaze::run(ckpt.as_deref(), &input, &out, method),
        Command::Eval { pred, gt, out } => eval::run(&pred, &gt, out.as_deref()),
        Command::Gradcheck { out, inject_fault } => gradcheck::run(&out, inject_fault),
    }
}

/// Parses arguments, runs, reports errors on stderr.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
