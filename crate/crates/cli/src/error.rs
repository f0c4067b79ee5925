use std::path::{Path, PathBuf};

use thiserror::Error;

/// Failures mapped onto the stable exit-code contract.
#[derive(Debug, Error)]
pub enum CliError {
    /// Malformed input or configuration (exit 2).
    #[error("{0}")]
    Invalid(String),
    /// Filesystem failure (exit 3).
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// The replay emitted no alerts (exit 4).
    #[error("no symptoms detected")]
    NoSymptoms,
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Invalid(_) => 2,
            CliError::Io { .. } => 3,
            CliError::NoSymptoms => 4,
        }
    }

    pub fn invalid(path: &Path, err: impl std::fmt::Display) -> Self {
        CliError::Invalid(format!("{}: {err}", path.display()))
    }
}

pub fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}
