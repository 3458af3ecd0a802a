use std::path::PathBuf;

/// Errors produced by the texture engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("parse error in {what} at byte {offset}: {message}")]
    Parse {
        what: &'static str,
        offset: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("dead filters (mean activation <= {threshold:e}): {}", .filters.join(", "))]
    DeadFilters { threshold: f64, filters: Vec<String> },

    #[error("layer {layer}: feature covariance has rank {rank}, cannot fit {requested} components")]
    RankDeficient {
        layer: String,
        rank: usize,
        requested: usize,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad inputs rather than numeric/runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Dimension(_)
                | Error::Validation(_)
                | Error::Usage(_)
                | Error::Parse { .. }
                | Error::Io { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
