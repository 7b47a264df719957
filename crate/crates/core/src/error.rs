use std::path::PathBuf;

/// Error type shared by every module in the crate.
///
/// The CLI maps variants onto stable exit codes, so the categories here are
/// part of the public contract: `Config` -> 2, `Data` -> 3, `Checkpoint` -> 4,
/// everything else -> 1.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor extents do not line up (matmul inner dims, kernel vs. input, ...).
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A hyperparameter or argument is outside its legal range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Numerical failure: non-finite inputs, decomposition breakdown.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An API contract was violated (non-scalar loss, double backward, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Dataset loading, splitting or sampling failed.
    #[error("data error: {0}")]
    Data(String),

    /// Run configuration could not be parsed or validated.
    #[error("config error: {0}")]
    Config(String),

    /// Checkpoint is missing, corrupt or incompatible with the model.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
