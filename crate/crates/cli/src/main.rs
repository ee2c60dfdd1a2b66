mod keys;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use tofe_core::Error;

/// Detect diffusion-generated images with TOFE features on a desk-scale toy
/// world. Each subcommand runs one pipeline stage and writes its artifacts
/// and a run log under the output directory.
#[derive(Debug, Parser)]
#[command(name = "tofe", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Stage,
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Output directory for artifacts, report and run log.
    #[arg(long, global = true, value_name = "DIR", default_value = "tofe-out")]
    pub out: PathBuf,
    /// Dataset directory; defaults to <out>/data.
    #[arg(long, global = true, value_name = "DIR")]
    pub dataset: Option<PathBuf>,
    /// Master seed; replaces every data/optimizer seed with one derived from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for image-parallel stages; defaults to all cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Stage {
    /// Train the feature-extractor denoiser and every generator denoiser.
    TrainGenerators,
    /// Sample the real/fake corpus and write it with a manifest.
    BuildDataset,
    /// Extract TOFE features for every dataset image.
    Extract,
    /// Separation analysis (t-SNE, MMD, JS) and reconstruction quality.
    Analyze,
    /// Train the detector on the training split of the training generators.
    TrainDetector,
    /// Score the detector on every generator's test split.
    Evaluate,
    /// Re-score the detector on corrupted test images.
    Robustness,
    /// Sweep eta, iterations and steps and report separation per value.
    Ablate,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::TrainGenerators => "train-generators",
            Stage::BuildDataset => "build-dataset",
            Stage::Extract => "extract",
            Stage::Analyze => "analyze",
            Stage::TrainDetector => "train-detector",
            Stage::Evaluate => "evaluate",
            Stage::Robustness => "robustness",
            Stage::Ablate => "ablate",
        }
    }
}

const EXIT_CODES: &str = "Exit codes: 0 success, 1 other failure, 2 invalid config or usage, \
3 missing input, 4 numeric failure, 5 i/o or file format error.\n\
Errors are printed to stderr as one JSON line: {\"error\": kind, \"code\": n, \"message\": text}.";

fn command() -> clap::Command {
    let help = format!("{}\n{EXIT_CODES}", keys::help_text());
    Cli::command()
        .after_help(help.clone())
        .mut_subcommands(|sub| sub.after_help(help.clone()))
}

fn error_kind(e: &Error) -> (&'static str, u8) {
    match e {
        Error::Config(_) => ("config", 2),
        Error::MissingInput(_) => ("missing_input", 3),
        Error::Numeric(_) => ("numeric", 4),
        Error::Io(_) | Error::Format(_) | Error::Json(_) => ("io", 5),
        Error::Shape { .. } | Error::StepIndex { .. } | Error::Contract(_) => ("other", 1),
    }
}

fn fail(kind: &str, code: u8, message: &str) -> ExitCode {
    let line = serde_json::json!({ "error": kind, "code": code, "message": message });
    eprintln!("{line}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let matches = match command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            return fail("usage", 2, msg.lines().next().unwrap_or("invalid arguments"));
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => return fail("usage", 2, &e.to_string()),
    };
    match stages::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = error_kind(&e);
            fail(kind, code, &e.to_string())
        }
    }
}
