//! `ramer` command-line front end.
//!
//! Every subcommand reads one JSON [`RunConfig`], applies flag overrides,
//! validates, and then works on artifacts under `output_dir`:
//!
//! ```text
//! data/      manifest.jsonl, {audio,video,text}.rfv, meta.json   gen-data
//! pretrain/  checkpoint.ck                                       pretrain
//! db/<tier>/ store tables and store.json                         build-db
//! models/    <condition>.model                                   train
//! eval/      grids.json, runs.jsonl, report.{md,csv}             eval
//! ablate/    grids.json, runs.jsonl, report.{md,csv}             ablate
//! ```
//!
//! Each artifact records the hash of its upstream inputs. A stage whose
//! output already exists with the expected hash is skipped; one that exists
//! with a different hash is only replaced under `--force`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ramer_core::dataset::ScaleTier;
use ramer_core::eval::ReportFormat;
use ramer_core::pipeline::{DbSource, MissingCondition};
use ramer_core::RamerError;

mod commands;
mod config;

pub use config::{DatasetSource, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "ramer",
    version,
    about = "Retrieval-augmented classification with missing modalities"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus and write it to disk.
    GenData(Common),
    /// Train the three unimodal encoders on complete samples.
    Pretrain(Common),
    /// Encode the database tier with the pretrained encoders.
    BuildDb(Common),
    /// Train the missing-modality classifier for one condition.
    Train(Common),
    /// Cross-validate the configured pipeline over its conditions.
    Eval(Common),
    /// Run the ablation grid.
    Ablate(Common),
    /// Merge grid files from `eval` or `ablate` into one table.
    Report(ReportArgs),
    /// Write a seeded sample of stored hidden features as CSV.
    ExportHidden(ExportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub tier: Option<ScaleTier>,
    /// Missing-modality condition code such as `a` or `vl`.
    #[arg(long)]
    pub condition: Option<MissingCondition>,
    /// Retrieved neighbours per available modality.
    #[arg(long)]
    pub k: Option<usize>,
    /// Registered similarity metric.
    #[arg(long)]
    pub metric: Option<String>,
    #[arg(long)]
    pub db_source: Option<DbSource>,
    #[arg(long)]
    pub freeze_encoders: bool,
    /// Average retrieved substitutes with the encoders' output on absent input.
    #[arg(long)]
    pub keep_miss: bool,
    /// Concurrent cross-validation runs.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Overwrite artifacts built from a different configuration.
    #[arg(long)]
    pub force: bool,
    /// Overrides `output_dir` from the config.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// `grids.json` files written by `eval` or `ablate`.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Output file; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value = "md")]
    pub format: ReportFormat,
}

#[derive(Debug, Clone, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub common: Common,
    /// Samples per modality.
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    /// Output CSV; `<output_dir>/export/hidden_<tier>.csv` when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// A failed command, classified by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Invalid configuration or arguments (exit 2).
    Config(String),
    /// Missing, stale or corrupt artifact (exit 3).
    Artifact(String),
    /// Anything else (exit 4).
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Artifact(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Artifact(m) => write!(f, "artifact error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<RamerError> for CliError {
    fn from(e: RamerError) -> Self {
        let msg = e.to_string();
        match e {
            RamerError::InvalidConfig(_) | RamerError::UnknownStrategy { .. } => {
                CliError::Config(msg)
            }
            RamerError::StaleArtifact { .. }
            | RamerError::BadMagic { .. }
            | RamerError::VersionMismatch { .. }
            | RamerError::CrcMismatch { .. }
            | RamerError::Format { .. }
            | RamerError::Parse { .. } => CliError::Artifact(msg),
            RamerError::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
                CliError::Artifact(msg)
            }
            _ => CliError::Runtime(msg),
        }
    }
}

/// Runs one parsed command line.
pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(c) => commands::gen_data(&c),
        Command::Pretrain(c) => commands::pretrain(&c),
        Command::BuildDb(c) => commands::build_db(&c),
        Command::Train(c) => commands::train(&c),
        Command::Eval(c) => commands::eval(&c),
        Command::Ablate(c) => commands::ablate(&c),
        Command::Report(r) => commands::report(&r),
        Command::ExportHidden(e) => commands::export_hidden(&e),
    }
}

/// Parses the process arguments, runs, and maps the outcome to an exit code.
pub fn main_entry() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ramer: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
