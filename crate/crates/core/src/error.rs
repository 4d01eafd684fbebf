use std::path::PathBuf;

/// Errors surfaced by the library and the command-line runner.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("SVD did not converge after {sweeps} sweeps")]
    NumericalFailure { sweeps: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("degenerate task: baseline MSE is zero")]
    DegenerateTask,

    #[error("training diverged at step {step}")]
    Diverged { step: usize },

    #[error("undefined quantity: {0}")]
    Undefined(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
