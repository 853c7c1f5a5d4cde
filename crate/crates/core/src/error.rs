use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the toolkit surfaces to callers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: format error at byte offset {offset}: {detail}")]
    Format {
        path: String,
        offset: u64,
        detail: String,
    },

    #[error("checkpoint checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Checksum { stored: u32, computed: u32 },

    #[error("unknown model spec id {0:?}")]
    UnknownSpec(String),

    #[error("dtype mismatch: file holds {found}, expected {expected}")]
    DtypeMismatch {
        found: &'static str,
        expected: &'static str,
    },

    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Divergence {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Stable numeric code, used as the process exit status by the CLI.
    pub fn code(&self) -> i32 {
        match self {
            Error::Io { .. } => 2,
            Error::Config(_) => 3,
            Error::Usage(_) => 4,
            Error::Format { .. } => 5,
            Error::Checksum { .. } => 6,
            Error::UnknownSpec(_) => 7,
            Error::DtypeMismatch { .. } => 8,
            Error::Divergence { .. } => 9,
            Error::Shape { .. } => 10,
            Error::NonFinite(_) => 11,
        }
    }
}
