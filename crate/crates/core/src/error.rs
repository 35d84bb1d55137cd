use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration value or CLI usage.
    #[error("config error: {0}")]
    Config(String),

    /// Input data that is malformed or incompatible with the run.
    #[error("data error: {0}")]
    Data(String),

    #[error("unknown word {0:?} is not in the vocabulary")]
    UnknownWord(String),

    #[error("checkpoint field `{field}`: {reason}")]
    Checkpoint { field: String, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite log-probability for pair {pair}")]
    NonFinite { pair: usize },

    /// Every paired difference was exactly zero.
    #[error("degenerate comparison: no difference between the paired scores")]
    DegenerateComparison,

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn checkpoint(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Checkpoint {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code used by the CLI: 2 for configuration problems,
    /// 3 for data or compatibility problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            _ => 3,
        }
    }
}
