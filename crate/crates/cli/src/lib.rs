//! Command-line front end for the `mitodet` pipeline.
//!
//! Every subcommand is also a library function in [`commands`] so the
//! pipeline can be driven from tests without spawning processes.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod overlay;

pub use config::PipelineConfig;

/// Exit status classes.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Data(mitodet::Error),
    #[error(transparent)]
    Scorer(mitodet::Error),
    #[error("{failed} of {total} inputs could not be processed")]
    Partial { failed: usize, total: usize },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) | CliError::Partial { .. } => 2,
            CliError::Scorer(_) => 3,
        }
    }
}

impl From<mitodet::Error> for CliError {
    fn from(e: mitodet::Error) -> Self {
        if e.is_scorer_protocol() {
            CliError::Scorer(e)
        } else {
            CliError::Data(e)
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "mitodet", version, about = "Mitotic-figure detection pipeline")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// Pipeline configuration (TOML)
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores)
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// More log output; repeat for debug
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw disk pseudo ground-truth masks around mitotic points
    Maskgen(commands::MaskgenArgs),
    /// Harvest training patch records
    Sample(commands::SampleArgs),
    /// Split image ids into cross-validation folds
    Folds(commands::FoldsArgs),
    /// Segment, extract and refine candidates for a directory of images
    Detect(commands::DetectArgs),
    /// Refine an existing candidate CSV with the configured classifiers
    Refine(commands::RefineArgs),
    /// Score detections against annotations
    Eval(commands::EvalArgs),
    /// Map an image onto a target stain basis
    Normalize(commands::NormalizeArgs),
    /// Apply the configured augmentation list to an image
    Augment(commands::AugmentArgs),
}

/// Resolves the configuration and runs `cli.command` on a pool of
/// `--jobs` threads.
pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.global.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.global.seed {
        cfg.seed = seed;
    }
    let pool = match cli.global.jobs {
        Some(0) => return Err(CliError::Usage("--jobs must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n).build(),
        None => rayon::ThreadPoolBuilder::new().build(),
    }
    .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    pool.install(|| match &cli.command {
        Command::Maskgen(a) => commands::maskgen(a, &cfg).map(drop),
        Command::Sample(a) => commands::sample(a, &cfg).map(drop),
        Command::Folds(a) => commands::folds(a, &cfg).map(drop),
        Command::Detect(a) => commands::detect(a, &cfg).map(drop),
        Command::Refine(a) => commands::refine(a, &cfg).map(drop),
        Command::Eval(a) => commands::eval(a, &cfg).map(drop),
        Command::Normalize(a) => commands::normalize(a, &cfg),
        Command::Augment(a) => commands::augment(a, &cfg),
    })
}
