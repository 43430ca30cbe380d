use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CptError> = std::result::Result<T, E>;

/// Every failure the library can report.
///
/// The variants follow the error classes of the public operations: bad
/// arguments, malformed files, inconsistent inputs, unusable configurations,
/// datasets that cannot support an episode shape, and numerical blowups.
#[derive(Debug, Error)]
pub enum CptError {
    #[error("invalid input: {0}")]
    Input(String),

    #[error("parse error in {path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("inconsistent data: {0}")]
    Consistency(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("insufficient data: {0}")]
    Data(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("epoch {epoch}: {source}")]
    Epoch {
        epoch: usize,
        #[source]
        source: Box<CptError>,
    },
}

impl CptError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CptError::Io {
            context: context.into(),
            source,
        }
    }

    /// Short machine-readable class name, used by the command line driver.
    pub fn kind(&self) -> &'static str {
        match self {
            CptError::Input(_) => "input",
            CptError::Parse { .. } => "parse",
            CptError::Consistency(_) => "consistency",
            CptError::Config(_) => "config",
            CptError::Data(_) => "data",
            CptError::Numerical(_) => "numerical",
            CptError::Internal(_) => "internal",
            CptError::Io { .. } => "io",
            CptError::Epoch { source, .. } => source.kind(),
        }
    }
}
