use std::fmt;
use std::path::Path;

use crate::config::ConfigError;

/// Command failure with its process exit code.
#[derive(Debug)]
pub enum CliError {
    Config(ConfigError),
    Core(addrop::Error),
    Output { path: String, source: std::io::Error },
    Internal(String),
}

impl CliError {
    pub fn output(path: &Path, source: std::io::Error) -> Self {
        CliError::Output {
            path: path.display().to_string(),
            source,
        }
    }

    /// 2 for configuration problems, 3 for data and file problems, 4 for
    /// broken internal contracts.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) => match e {
                addrop::Error::Config(_) => 2,
                addrop::Error::Data(_) | addrop::Error::Io { .. } => 3,
                addrop::Error::Shape { .. } | addrop::Error::Contract(_) => 4,
            },
            CliError::Output { .. } => 3,
            CliError::Internal(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "{e}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Output { path, source } => write!(f, "cannot write {path}: {source}"),
            CliError::Internal(m) => write!(f, "internal error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}

impl From<addrop::Error> for CliError {
    fn from(e: addrop::Error) -> Self {
        CliError::Core(e)
    }
}
