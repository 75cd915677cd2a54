use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("no feasible plan: {0}")]
    Infeasible(String),

    #[error("search space of {size:.3e} assignments exceeds the exact-solver limit of {limit:.0e}; use the dp solver")]
    SearchSpaceTooLarge { size: f64, limit: f64 },

    #[error("schema mismatch in {file}: field `{field}`")]
    Schema { file: String, field: String },

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
