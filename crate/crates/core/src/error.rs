use thiserror::Error;

/// Unified error type. Variants group into three exit classes for the CLI:
/// usage (1), data (2), contract (3).
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {op} on shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid parameter {name}: {why}")]
    Param { name: &'static str, why: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("index out of range: {what} = {got}, limit {limit}")]
    Index {
        what: &'static str,
        got: usize,
        limit: usize,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    /// CLI exit code class: 1 usage, 2 data, 3 contract.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Param { .. } | Error::Config(_) => 1,
            Error::Data(_) | Error::Io { .. } | Error::Serde(_) => 2,
            Error::Shape { .. }
            | Error::Index { .. }
            | Error::Contract(_)
            | Error::NonFinite(_) => 3,
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
