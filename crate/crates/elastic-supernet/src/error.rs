//! Process-level error taxonomy. Every failure maps onto one of three
//! nonzero exit codes: 2 for configuration problems, 3 for data and
//! format problems, 4 for numerical failures during training.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) | CliError::Io { .. } => 3,
            CliError::Numeric(_) => 4,
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}

impl From<elastic_core::error::Error> for CliError {
    fn from(e: elastic_core::error::Error) -> Self {
        use elastic_core::error::Error;
        match e {
            // Messages come through without the inner class prefix where the
            // CLI variant would repeat it.
            Error::Config(m) => CliError::Config(m),
            // Degenerate search settings are configuration problems, not
            // numerical ones.
            Error::Search(m) => CliError::Config(format!("search: {m}")),
            Error::Input(m) => CliError::Data(m),
            Error::Dim { .. } => CliError::Data(e.to_string()),
            Error::NonFinite { .. } => CliError::Numeric(e.to_string()),
        }
    }
}
