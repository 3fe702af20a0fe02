use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("axis {axis} has extent {extent}, which is not divisible by {divisor}")]
    Indivisible {
        axis: &'static str,
        extent: usize,
        divisor: usize,
    },

    #[error("bounding box exceeds target along {axis}: {extent} > {target}")]
    BoundingBox {
        axis: &'static str,
        extent: usize,
        target: usize,
    },

    #[error("index {index} out of range for {plane} plane with extent {extent}")]
    SliceBounds {
        plane: &'static str,
        index: usize,
        extent: usize,
    },

    #[error("bad magic bytes in {0}")]
    BadMagic(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("payload length {found} does not match header dims (expected {expected} bytes)")]
    DimMismatch { expected: usize, found: usize },

    #[error("invalid value: {0}")]
    Invalid(String),

    #[error("empty codebook")]
    EmptyCodebook,

    #[error("non-finite loss term `{0}`")]
    NonFinite(&'static str),

    #[error("configuration invalid:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),

    #[error("config hash mismatch: checkpoint {checkpoint}, current {current}")]
    ConfigHash { checkpoint: String, current: String },

    #[error("missing files: {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    MissingFiles(Vec<PathBuf>),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by user input rather than the runtime.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Invalid(_)
                | Error::Indivisible { .. }
                | Error::Shape(_)
                | Error::ConfigHash { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
