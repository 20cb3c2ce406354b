use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, RamerError>;

#[derive(Debug, Error)]
pub enum RamerError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("degenerate vector: norm {norm:e} is below the 1e-10 threshold")]
    DegenerateVector { norm: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("class index {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },

    #[error("cannot stratify: class {label} has only {count} labeled samples (need at least 3)")]
    Stratify { label: String, count: usize },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{path}: at byte {offset}: {msg}")]
    Format {
        path: PathBuf,
        offset: u64,
        msg: String,
    },

    #[error("{path}: bad magic, expected {expected:?}")]
    BadMagic { path: PathBuf, expected: String },

    #[error("{path}: unsupported version {found} (expected {expected})")]
    VersionMismatch {
        path: PathBuf,
        expected: u16,
        found: u16,
    },

    #[error("{path}: CRC mismatch (stored {stored:08x}, computed {computed:08x})")]
    CrcMismatch {
        path: PathBuf,
        stored: u32,
        computed: u32,
    },

    #[error("unknown sample id {0:?}")]
    UnknownId(String),

    #[error("duplicate sample id {0:?}")]
    DuplicateId(String),

    #[error("sample {id:?} has no {modality} embedding")]
    MissingEmbedding { id: String, modality: &'static str },

    #[error("no searchable records remain after exclusions")]
    EmptyStore,

    #[error("training split is empty")]
    EmptyTrainSplit,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown {kind} strategy {name:?} (registered: {available})")]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        available: String,
    },

    #[error("stale artifact {what}: expected hash {expected}, found {found}")]
    StaleArtifact {
        what: String,
        expected: String,
        found: String,
    },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}
