use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by the engine.
///
/// The variants split into two families that callers (the CLI in particular)
/// treat differently: input problems ([`Error::is_validation`]) and numeric
/// failures during a computation.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },

    #[error("degenerate kernel: k2 + k3 = 0 with K1 = {k1}")]
    DegenerateKernel { k1: f64 },

    #[error("voxel {index}: {source}")]
    Voxel {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("truncated payload in {path}: expected {expected} bytes, found {actual}")]
    Truncated {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    pub fn invalid(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad inputs rather than a failing computation.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Invalid { .. }
            | Error::DegenerateKernel { .. }
            | Error::Truncated { .. }
            | Error::Io { .. }
            | Error::Json { .. }
            | Error::Csv { .. } => true,
            Error::Voxel { source, .. } => source.is_validation(),
            Error::Numeric(_) => false,
        }
    }
}
