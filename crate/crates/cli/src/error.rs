use std::path::{Path, PathBuf};

use thiserror::Error;

/// Failures of a CLI command, grouped into exit-code categories.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("run directory {0} is locked by another process")]
    Locked(PathBuf),

    #[error(transparent)]
    Core(lil_core::Error),
}

impl CliError {
    pub const EXIT_INTERNAL: u8 = 1;
    pub const EXIT_CONFIG: u8 = 2;
    pub const EXIT_DATA: u8 = 3;
    pub const EXIT_NUMERIC: u8 = 4;
    pub const EXIT_IO: u8 = 5;
    pub const EXIT_LOCKED: u8 = 6;

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => Self::EXIT_CONFIG,
            CliError::Data(_) => Self::EXIT_DATA,
            CliError::Numeric(_) => Self::EXIT_NUMERIC,
            CliError::Io { .. } => Self::EXIT_IO,
            CliError::Locked(_) => Self::EXIT_LOCKED,
            CliError::Core(_) => Self::EXIT_INTERNAL,
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Reclassify a core error that happened while touching `path`.
    pub fn at(path: &Path, err: lil_core::Error) -> Self {
        use lil_core::Error as E;
        match err {
            E::Io(source) => CliError::io(path, source),
            E::Json(_) | E::Format(_) | E::Version { .. } => {
                CliError::Data(format!("{}: {err}", path.display()))
            }
            other => other.into(),
        }
    }
}

impl From<lil_core::Error> for CliError {
    fn from(err: lil_core::Error) -> Self {
        use lil_core::Error as E;
        match err {
            E::InvalidArgument(m) => CliError::Config(m),
            E::Diverged { .. } | E::NonFinite { .. } => CliError::Numeric(err.to_string()),
            E::Unsolvable { .. } | E::Format(_) | E::Version { .. } | E::Json(_) => {
                CliError::Data(err.to_string())
            }
            other => CliError::Core(other),
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
