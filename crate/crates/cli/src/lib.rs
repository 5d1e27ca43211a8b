//! Experiment driver for the QGE toolkit.
//!
//! Each subcommand reads one JSON config and writes a run directory holding
//! the resolved `config.json`, a tidy `results.csv` and a `summary.json`.
//! Every row carries the config hash and the seed that produced it, and
//! reruns are byte-identical regardless of the worker count.

pub mod commands;
pub mod config;

use std::fmt;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use qge_core::Error as CoreError;

/// Failures that map to a documented exit code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Failure {
    /// Invalid config or arguments (exit 2).
    Config(String),
    /// Unreadable or invalid data, missing referenced files (exit 3).
    Data(String),
    /// Every statistic or cell was skipped (exit 4). Outputs are still
    /// written.
    Degenerate(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Data(_) => 3,
            Failure::Degenerate(_) => 4,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "config error: {m}"),
            Failure::Data(m) => write!(f, "data error: {m}"),
            Failure::Degenerate(m) => write!(f, "numeric degeneracy: {m}"),
        }
    }
}

impl std::error::Error for Failure {}

/// Sorts a core error into an exit-code class. Errors that indicate a bug
/// or an I/O problem on the output side stay unclassified (exit 1).
pub fn classify(err: CoreError) -> anyhow::Error {
    let msg = err.to_string();
    match err {
        CoreError::RefuseExhaustive { .. }
        | CoreError::InvalidTransform(_)
        | CoreError::InvalidMetricParam(_)
        | CoreError::InvalidTrainConfig(_)
        | CoreError::InvalidPatch { .. }
        | CoreError::InvalidGrouping(_)
        | CoreError::InvalidSchema(_)
        | CoreError::InvalidK { .. } => Failure::Config(msg).into(),
        CoreError::Io { .. }
        | CoreError::Parse { .. }
        | CoreError::RaggedRow { .. }
        | CoreError::UnknownLabel { .. }
        | CoreError::EmptyDataset
        | CoreError::GenerationFailed(_)
        | CoreError::Csv(_)
        | CoreError::Json(_)
        | CoreError::Shape { .. }
        | CoreError::InvalidModel(_) => Failure::Data(msg).into(),
        other => anyhow::Error::new(other),
    }
}

/// Exit code for an error returned by [`run`].
pub fn exit_code(err: &anyhow::Error) -> u8 {
    err.downcast_ref::<Failure>().map_or(1, Failure::exit_code)
}

#[derive(Debug, Parser)]
#[command(name = "qge", version, about = "Quality Gap Estimate experiment driver")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads (default: all cores). Output does not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Run directory; overrides `output.dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Replaces the config's master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Write into a non-empty run directory.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate or load the dataset and write it with its split.
    GenData,
    /// Train the configured model variants and save their weights.
    Train,
    /// Score every explored explanation with q, QGE and QRAND_1..K.
    Explore,
    /// Rank correlations, stratified τ, K curves and QGE histograms.
    Compare,
    /// Meta-evaluation consistency (MC) reports.
    Metaeval,
}

impl Command {
    pub fn as_str(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train => "train",
            Command::Explore => "explore",
            Command::Compare => "compare",
            Command::Metaeval => "metaeval",
        }
    }
}

pub fn run(cli: &Cli) -> anyhow::Result<()> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Failure::Config("--config is required".into()))?;
    let mut cfg = config::Config::load(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(out) = &cli.out {
        cfg.output.dir = Some(out.clone());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.unwrap_or(0))
        .build()?;
    pool.install(|| commands::execute(cli.command, &cfg, cli.force))
}
