//! `mstf`: synthesise data, inspect and convert annotations, train, run
//! streaming inference and evaluate.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::Serialize;

use mstf_core::dataset::ANNOTATION_FORMAT_VERSION;
use mstf_core::evaluation::EVAL_FORMAT_VERSION;
use mstf_core::mstf::CHECKPOINT_VERSION;

/// A failed run, classified by exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags, config or inputs that contradict the config: exit 2.
    Usage(anyhow::Error),
    /// Everything else: exit 1.
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<mstf_core::Error>() {
            Some(mstf_core::Error::Config(_)) => Failure::Usage(e),
            _ => Failure::Runtime(e),
        }
    }
}

impl From<mstf_core::Error> for Failure {
    fn from(e: mstf_core::Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

pub type CmdResult = Result<(), Failure>;

pub fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(anyhow::anyhow!(msg.into()))
}

#[derive(Debug, Parser)]
#[command(name = "mstf", about = "Small-object video detection with multi-scale spatio-temporal flow")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GlobalArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads (0: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Reject annotation files with any invariant violation.
    #[arg(long, global = true)]
    pub strict: bool,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic annotated video set.
    Synth(commands::SynthArgs),
    /// Dataset statistics as JSON or plot-ready CSV.
    Stats(commands::StatsArgs),
    /// Check an annotation file (and optionally a split file).
    Validate(commands::ValidateArgs),
    /// Import COCO-VID annotations or rewrite a native file.
    Convert(commands::ConvertArgs),
    /// Split wide videos into two square crops and downsample them.
    Tile(commands::TileArgs),
    /// Fill frames between annotated keyframes.
    Interpolate(commands::InterpolateArgs),
    /// Train the detector.
    Train(commands::TrainArgs),
    /// Streaming inference with per-frame latency.
    Infer(commands::InferArgs),
    /// Size-bucketed AP of a prediction file.
    Eval(commands::EvalArgs),
    /// Static baseline against the fusion neck on the synthetic benchmark.
    Bench(commands::BenchArgs),
}

fn version_string() -> String {
    format!(
        "{} (annotation format {ANNOTATION_FORMAT_VERSION}, eval format {EVAL_FORMAT_VERSION}, checkpoint format {CHECKPOINT_VERSION})",
        mstf_core::VERSION
    )
}

fn main() -> ExitCode {
    let cmd = Cli::command().version(&*Box::leak(version_string().into_boxed_str()));
    let cli = match cmd.try_get_matches().and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = if cli.global.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {}", render(&e));
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {}", render(&e));
            ExitCode::from(1)
        }
    }
}

/// The error chain joined by `: `, skipping causes already quoted by the
/// message above them.
fn render(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}
