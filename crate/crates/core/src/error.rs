use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Checkpoint decoding failures. Each variant maps to a distinct code so
/// callers can tell a wrong file apart from a damaged one.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic bytes {found:?}, expected \"ULCK\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported checkpoint version {found} (this build reads {supported})")]
    Version { found: u32, supported: u32 },
    #[error("checkpoint truncated while reading {what}")]
    Truncated { what: &'static str },
    #[error("tensor `{name}` has shape {found:?}, config expects {expected:?}")]
    Shape { name: String, found: Vec<usize>, expected: Vec<usize> },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

impl FormatError {
    pub fn code(&self) -> u32 {
        match self {
            FormatError::BadMagic { .. } => 10,
            FormatError::Version { .. } => 11,
            FormatError::Truncated { .. } => 12,
            FormatError::Shape { .. } => 13,
            FormatError::Malformed(_) => 14,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A NaN or infinity surfaced during forward or backward evaluation.
    #[error("numeric failure at node {node}: {detail}")]
    Numeric { node: usize, detail: String },

    /// Training diverged; carries the loss trace up to the failure.
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String, trace: Vec<f64> },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint format error: {0}")]
    Format(#[from] FormatError),

    #[error("io error on {path:?}: {source}")]
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
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Short machine-readable kind, used to tag failed sweep cells.
    pub fn tag(&self) -> &'static str {
        match self {
            Error::Contract(_) => "contract",
            Error::Numeric { .. } => "numeric",
            Error::Diverged { .. } => "diverged",
            Error::Config(_) => "config",
            Error::Data(_) => "data",
            Error::Format(_) => "format",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }

    /// Process exit code: 1 usage, 2 data/format, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Contract(_) | Error::Config(_) => 1,
            Error::Data(_) | Error::Format(_) | Error::Io { .. } | Error::Json(_) | Error::Csv(_) => 2,
            Error::Numeric { .. } | Error::Diverged { .. } => 3,
        }
    }
}
