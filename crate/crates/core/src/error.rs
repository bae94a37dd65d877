use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the beamcast pipelines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("root index {root} is not coprime with sequence length {len}")]
    NonCoprimeRoot { root: usize, len: usize },

    #[error("group size {group} does not divide antenna count {antennas}")]
    GroupSize { group: usize, antennas: usize },

    #[error("degenerate sample: observation has zero variance")]
    DegenerateSample,

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("invalid routing directive: {0}")]
    Routing(String),

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("tensor '{name}' ({role}) has shape {found:?} in file but config expects {expected:?}")]
    TensorShape {
        name: String,
        role: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("missing artifact: {0}")]
    MissingArtifact(PathBuf),

    #[error(
        "config fingerprint mismatch: checkpoint {checkpoint:016x}, configuration {config:016x}"
    )]
    Fingerprint { checkpoint: u64, config: u64 },

    #[error("non-finite loss at stage {stage}, epoch {epoch}, batch {batch} (lr {lr:e})")]
    NumericalAbort {
        stage: String,
        epoch: usize,
        batch: usize,
        lr: f64,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
