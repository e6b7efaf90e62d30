use std::path::PathBuf;

/// Errors raised across the segmentation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shape, arity, mode).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Spatial extents are incompatible with an operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// Input lies outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A non-finite or otherwise unusable number was produced.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A configuration document failed validation.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// On-disk data did not match its declared layout.
    #[error("format error: {0}")]
    Format(String),

    #[error("phantom generation failed: {0}")]
    Generation(String),

    #[error("i/o error on {path}: {source}")]
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
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
