use thiserror::Error;
use xlpolicy_core::Error as CoreError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error(transparent)]
    Core(#[from] CoreError),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    /// 3 for numeric divergence, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Divergence(_) | CliError::Core(CoreError::NonFinite(_)) => 3,
            _ => 2,
        }
    }
}
