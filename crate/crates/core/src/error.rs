use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the numerical engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("context window too short: need more than {needed} samples, got {got}")]
    WindowTooShort { needed: usize, got: usize },

    #[error("series too short: need at least {needed} samples, got {got}")]
    SeriesTooShort { needed: usize, got: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("edge ({0}, {1}) is not part of the working graph")]
    UnknownEdge(usize, usize),

    #[error("sheaf parameters cover {have} edges but the graph has {need}")]
    MissingEdgeParameters { have: usize, need: usize },

    #[error("perturbation cannot be placed: {0}")]
    InfeasiblePlacement(String),

    #[error("state became non-finite at integration step {step} (node {node})")]
    NonFiniteState { step: usize, node: usize },

    #[error("empty sequence")]
    EmptySequence,

    #[error("training diverged: non-finite loss in batch {batch} of epoch {epoch}")]
    Divergence { epoch: usize, batch: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
