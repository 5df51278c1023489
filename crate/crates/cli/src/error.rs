use std::path::{Path, PathBuf};

use thiserror::Error;

/// Failure classes of the CLI, each with its own exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("missing file: {}", .0.display())]
    Missing(PathBuf),
    #[error("checkpoint/config mismatch: {0}")]
    Mismatch(String),
    #[error("refusing checkpoint trained on perturbed data: {0}")]
    Leakage(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error(transparent)]
    Core(sheaf_ode::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(_) => 1,
            CliError::Schema(_) => 3,
            CliError::Missing(_) => 4,
            CliError::Mismatch(_) => 5,
            CliError::Leakage(_) => 6,
            CliError::Divergence(_) => 7,
        }
    }

    pub fn from_io(path: &Path, e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::Missing(path.to_path_buf())
        } else {
            CliError::Core(sheaf_ode::Error::Io {
                path: path.to_path_buf(),
                source: e,
            })
        }
    }
}

impl From<sheaf_ode::Error> for CliError {
    fn from(e: sheaf_ode::Error) -> Self {
        use sheaf_ode::Error as E;
        match e {
            E::Io { path, source } => CliError::from_io(&path, source),
            E::Divergence { .. } | E::NonFiniteState { .. } => CliError::Divergence(e.to_string()),
            E::Checkpoint(msg) => CliError::Mismatch(msg),
            E::Json(j) => CliError::Schema(j.to_string()),
            other => CliError::Core(other),
        }
    }
}
