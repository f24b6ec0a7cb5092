use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("training diverged at step {step}: {reason}")]
    Training { step: usize, reason: String },

    #[error("degenerate weights: {0}")]
    DegenerateWeights(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("objective error: {0}")]
    Objective(String),

    #[error("optimization failed at iteration {iteration}: {reason}")]
    Optimization { iteration: usize, reason: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("{path}:{line}: parse error: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },

    #[error("unknown class '{0}'")]
    Registry(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    /// True for failures the CLI reports with the numeric exit code.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Numeric(_)
                | Error::Training { .. }
                | Error::Optimization { .. }
                | Error::Objective(_)
                | Error::DegenerateWeights(_)
                | Error::UndefinedMetric(_)
        )
    }
}
