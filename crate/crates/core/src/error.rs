use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the library.
///
/// The CLI maps `Io`/`Json` to exit code 2 and everything else to exit code 1.
#[derive(Debug, Error)]
pub enum SftError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("index error: {0}")]
    Index(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("{path}: {msg} (byte offset {offset})")]
    Format {
        path: PathBuf,
        offset: u64,
        msg: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl SftError {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        SftError::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SftError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        SftError::Json {
            context: context.into(),
            source,
        }
    }

    /// True for errors caused by the filesystem or malformed files.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            SftError::Io { .. } | SftError::Format { .. } | SftError::Json { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, SftError>;
