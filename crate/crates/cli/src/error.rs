use thiserror::Error;

/// Failure of a command, carrying its process exit code.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum CliError {
    /// Unreadable, malformed or invalid input.
    #[error("{0}")]
    Input(String),
    /// The model backend or transport failed.
    #[error("{0}")]
    Backend(String),
    /// A broken internal invariant.
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 1,
            CliError::Backend(_) => 2,
            CliError::Internal(_) => 3,
        }
    }
}

impl From<rkt_core::rubric::RubricError> for CliError {
    fn from(e: rkt_core::rubric::RubricError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<rkt_core::rkt::BuildError> for CliError {
    fn from(e: rkt_core::rkt::BuildError) -> Self {
        match e {
            rkt_core::rkt::BuildError::Precondition(m) => CliError::Input(m),
            other => CliError::Backend(other.to_string()),
        }
    }
}

impl From<rkt_core::scoring::GradingError> for CliError {
    fn from(e: rkt_core::scoring::GradingError) -> Self {
        use rkt_core::scoring::GradingError as G;
        match e {
            G::Leaf { .. } => CliError::Backend(e.to_string()),
            G::Precondition(m) => CliError::Input(m),
            other => CliError::Internal(other.to_string()),
        }
    }
}

impl From<rkt_core::eval::EvalError> for CliError {
    fn from(e: rkt_core::eval::EvalError) -> Self {
        CliError::Input(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
