use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    Dimension {
        context: String,
        expected: String,
        found: String,
    },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("format error in {file} at byte {offset}: {message}")]
    Format {
        file: String,
        offset: u64,
        message: String,
    },

    #[error("unsupported format version {found} (newest supported is {supported})")]
    UnsupportedVersion { found: u16, supported: u16 },

    #[error("shape error in {file}: expected {expected}, found {found}")]
    Shape {
        file: String,
        expected: String,
        found: String,
    },

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("degenerate task {task}: {message}")]
    DegenerateTask { task: String, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("Kendall tau undefined: {0}")]
    UndefinedTau(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("value iteration did not converge within {iterations} iterations (last delta {delta:e})")]
    NonConvergence { iterations: usize, delta: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(context: impl Into<String>, expected: impl ToString, found: impl ToString) -> Self {
        Error::Dimension {
            context: context.into(),
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}
