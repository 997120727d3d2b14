use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = SpgError> = std::result::Result<T, E>;

/// Every failure the library reports. The variant doubles as the diagnostic
/// category surfaced by the command-line front end.
#[derive(Debug, Error)]
pub enum SpgError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("index {index} out of range for {what} of size {bound}")]
    OutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("model has no temporary replica chain attached")]
    NotAttached,

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("missing inputs: {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    Missing(Vec<PathBuf>),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl SpgError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        SpgError::InvalidArgument(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SpgError::Io {
            path: path.into(),
            source,
        }
    }

    /// Short category label used in command-line diagnostics.
    pub fn category(&self) -> &'static str {
        match self {
            SpgError::Shape { .. } | SpgError::NonFinite { .. } => "numeric",
            SpgError::InvalidArgument(_) | SpgError::OutOfRange { .. } | SpgError::NotAttached => {
                "usage"
            }
            SpgError::Divergence(_) => "divergence",
            SpgError::Format(_) | SpgError::Json(_) => "format",
            SpgError::Config { .. } => "config",
            SpgError::Missing(_) | SpgError::Io { .. } => "io",
        }
    }

    /// Process exit status for this error. Zero is reserved for success and
    /// one for a failed verification run.
    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "usage" | "config" => 2,
            "io" => 3,
            "format" => 4,
            "numeric" | "divergence" => 5,
            _ => 1,
        }
    }
}
