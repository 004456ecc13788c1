use latte::LatteError;
use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags or configuration; exit code 2.
    #[error("usage: {0}")]
    Usage(String),

    /// A check or metric fell short; exit code 1.
    #[error("{0}")]
    Failed(String),

    #[error(transparent)]
    Latte(#[from] LatteError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Latte(LatteError::InvalidConfig(_)) => 2,
            _ => 1,
        }
    }
}
