use thiserror::Error;

/// CLI-level errors with their process exit codes: 2 usage/config,
/// 3 data format, 4 numerical failure.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data format error: {0}")]
    DataFormat(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            CliError::DataFormat(_) | CliError::Io { .. } => 3,
            CliError::Numerical(_) => 4,
        }
    }

    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

impl From<ossd_core::Error> for CliError {
    fn from(e: ossd_core::Error) -> Self {
        match e {
            ossd_core::Error::InvalidConfig { .. } => CliError::Config(e.to_string()),
            ossd_core::Error::SingularCovariance => CliError::Numerical(e.to_string()),
            other => CliError::DataFormat(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
