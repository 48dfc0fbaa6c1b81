use std::path::PathBuf;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic {found:?}, expected \"BBQT\"")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported tensor file version {0}")]
    UnsupportedVersion(u32),

    #[error("unknown dtype tag {0}")]
    UnknownDtype(u8),

    #[error("truncated file: expected {expected} payload bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { index: usize, value: f32 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("code {code} is not representable: {reason}")]
    Unrepresentable { code: f32, reason: String },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("stale trace: {0}")]
    StaleTrace(String),

    #[error("uninitialized state: {0}")]
    Uninitialized(String),

    #[error("training diverged at iteration {iteration}: loss {loss} exceeded 10x initial loss {initial} for {window} consecutive iterations")]
    Diverged {
        iteration: usize,
        loss: f64,
        initial: f64,
        window: usize,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short stable identifier, used by the CLI's machine-readable error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::BadMagic { .. } => "bad_magic",
            Error::UnsupportedVersion(_) => "unsupported_version",
            Error::UnknownDtype(_) => "unknown_dtype",
            Error::Truncated { .. } => "truncated",
            Error::NonFinite { .. } => "non_finite",
            Error::Shape(_) => "shape",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Domain(_) => "domain",
            Error::Unrepresentable { .. } => "unrepresentable",
            Error::Unsupported(_) => "unsupported",
            Error::StaleTrace(_) => "stale_trace",
            Error::Uninitialized(_) => "uninitialized",
            Error::Diverged { .. } => "diverged",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
