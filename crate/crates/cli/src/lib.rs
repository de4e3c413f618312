//! The `capreward` command line.
//!
//! Every data command writes a [`manifest::RunManifest`] next to its outputs.
//! Exit codes: 0 success, 1 more failed records than `--max-fail-rate`
//! allows, 2 configuration or usage error.

pub mod backends;
pub mod commands;
pub mod manifest;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_PARTIAL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "capreward", version, about = "Caption-utility rewards: curation, filtering, scoring, evaluation, serving")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate multiple-choice questions for each image with a vision model.
    GenQa(commands::gen_qa::GenQaArgs),
    /// Keep questions answerable with the image and not without it.
    Filter(commands::filter::FilterArgs),
    /// Score caption groups and compute group-relative advantages.
    Score(commands::score::ScoreArgs),
    /// Drop near-duplicate images by embedding similarity.
    Dedup(commands::dedup::DedupArgs),
    /// Two-stage captioner evaluation: caption, then answer from text.
    EvalPrism(commands::prism::EvalPrismArgs),
    /// Run the HTTP reward service.
    Serve(commands::serve::ServeArgs),
}

/// Flags shared by the data commands.
#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// JSON file with a `backends` list of profiles. `mock-keyword` and
    /// `mock-keyword-abstain` are always available.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Persist backend responses here; reruns are served from it.
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    /// Largest tolerated fraction of failed records before exiting 1.
    #[arg(long, default_value_t = 0.0)]
    pub max_fail_rate: f64,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_PARTIAL,
        }
    }
}

pub fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

pub fn data(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

/// Record counts of a finished run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Tally {
    pub total: usize,
    pub failed: usize,
}

impl Tally {
    pub fn exit_code(&self, max_fail_rate: f64) -> i32 {
        if self.failed > 0 && self.failed as f64 > max_fail_rate * self.total as f64 {
            EXIT_PARTIAL
        } else {
            EXIT_OK
        }
    }
}

/// Parse `argv` (program name first) and run. Returns the process exit code.
pub async fn run_args<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let argv: Vec<String> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli, &argv).await {
        Ok(code) => code,
        Err(e) => {
            eprintln!("capreward: {e}");
            e.exit_code()
        }
    }
}

pub async fn run(cli: Cli, argv: &[String]) -> Result<i32, CliError> {
    match cli.command {
        Command::GenQa(a) => commands::gen_qa::run(a, argv).await,
        Command::Filter(a) => commands::filter::run(a, argv).await,
        Command::Score(a) => commands::score::run(a, argv).await,
        Command::Dedup(a) => commands::dedup::run(a, argv).await,
        Command::EvalPrism(a) => commands::prism::run(a, argv).await,
        Command::Serve(a) => commands::serve::run(a).await,
    }
}
