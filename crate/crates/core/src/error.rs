use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// On-disk layout or header does not match the expected format.
    #[error("format error: {0}")]
    Format(String),

    /// Payload is well-formed but its contents are invalid (NaN, wrong
    /// dimensions, off-simplex probabilities, ...).
    #[error("data error: {0}")]
    Data(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("argument error: {0}")]
    Argument(String),

    #[error("stratification error: {0}")]
    Stratification(String),

    #[error("filter design error: {0}")]
    Design(String),

    #[error("length error: need at least {needed} samples, got {got}")]
    Length { needed: usize, got: usize },

    #[error("parameter budget error: {count} parameters outside [{min}, {max}]")]
    Budget { count: usize, min: usize, max: usize },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("contamination error: {0}")]
    Contamination(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("missing dependency artifact: {}", .0.display())]
    Dependency(PathBuf),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn is_data_error(&self) -> bool {
        matches!(self, Error::Data(_) | Error::Format(_) | Error::Io { .. })
    }
}
