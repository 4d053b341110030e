//! `direc-gnn`: generate graphs, train, evaluate, sweep ablations and export
//! recommendations. On success stdout carries only the output path;
//! diagnostics go to stderr.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use direcgnn_core::train::Variant;

/// Exit codes.
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_DIVERGED: u8 = 4;
pub const EXIT_WIDTH: u8 = 5;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] direcgnn_core::Error),
    #[error("{}: {source}", path.display())]
    File { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use direcgnn_core::Error as E;
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::File { .. } | CliError::Io(_) | CliError::Csv(_) => EXIT_IO,
            CliError::Core(e) => match e {
                E::InvalidArgument(_) | E::InfeasibleConfig(_) => EXIT_CONFIG,
                E::Io(_) | E::Format(_) | E::Checkpoint(_) | E::Csv(_) => EXIT_IO,
                E::Divergence { .. } => EXIT_DIVERGED,
                E::FeatureWidth { .. } => EXIT_WIDTH,
                _ => EXIT_FAILURE,
            },
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "direc-gnn", version, about = "Dimension recommendation for cloud monitors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON config; fields left out keep their preset values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the seed of the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum VariantArg {
    Base,
    Al,
    #[value(name = "al_rl")]
    AlRl,
    Full,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Base => Variant::Base,
            VariantArg::Al => Variant::Al,
            VariantArg::AlRl => Variant::AlRl,
            VariantArg::Full => Variant::Full,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic monitor-entity graph.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Generator preset: desk, paper or long_range.
        #[arg(long, default_value = "desk")]
        preset: String,
    },
    /// Train a model on a graph.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        graph: PathBuf,
        /// Model preset: desk or paper.
        #[arg(long, default_value = "desk")]
        preset: String,
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on the test split of its graph.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sampled negatives per monitor; the fixed 2:1 candidates when absent.
        #[arg(long)]
        pool: Option<usize>,
        /// Monitor-degree buckets in the report.
        #[arg(long, default_value_t = 4)]
        buckets: usize,
        /// Also write per-relation attention heatmaps.
        #[arg(long)]
        heatmaps: bool,
    },
    /// Train and evaluate every cell of a sweep.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        graph: PathBuf,
        #[arg(long, default_value = "desk")]
        preset: String,
        /// JSON sweep spec.
        #[arg(long)]
        sweep: Option<PathBuf>,
    },
    /// Rank unused closure dimensions for monitors.
    Recommend {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated monitor indices.
        #[arg(long, value_delimiter = ',', required = true)]
        monitors: Vec<usize>,
        #[arg(short, long, default_value_t = 5)]
        k: usize,
    },
}

fn run(cli: Cli) -> CliResult<PathBuf> {
    let threads = config::threads()?;
    match cli.command {
        Command::Generate { common, preset } => commands::generate(&common, &preset, threads),
        Command::Train {
            common,
            graph,
            preset,
            variant,
            resume,
        } => commands::train(&common, &graph, &preset, variant.map(Into::into), resume, threads),
        Command::Eval {
            common,
            graph,
            checkpoint,
            pool,
            buckets,
            heatmaps,
        } => commands::eval(&common, &graph, &checkpoint, pool, buckets, heatmaps, threads),
        Command::Ablate {
            common,
            graph,
            preset,
            sweep,
        } => commands::ablate(&common, &graph, &preset, sweep.as_deref(), threads),
        Command::Recommend {
            common,
            graph,
            checkpoint,
            monitors,
            k,
        } => commands::recommend(&common, &graph, &checkpoint, &monitors, k, threads),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(path) => {
            println!("{}", path.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
