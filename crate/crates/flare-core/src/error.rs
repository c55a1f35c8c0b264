//! Error type shared by every module in the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    /// Shapes that cannot be combined by the requested operation.
    #[error("shape mismatch in {op}: {details}")]
    ShapeMismatch { op: &'static str, details: String },

    /// A structurally invalid configuration (zero sizes, C not divisible by H, ...).
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// NaN or infinity where a finite value is required.
    #[error("non-finite value in {op}: {details}")]
    NonFinite { op: &'static str, details: String },

    /// An input that is finite but outside the operation's domain.
    #[error("invalid value in {op}: {details}")]
    InvalidValue { op: &'static str, details: String },

    /// An iterative solver ran out of iterations.
    #[error("{solver} did not converge within {iters} iterations (residual {residual:.3e})")]
    NoConvergence {
        solver: &'static str,
        iters: usize,
        residual: f64,
    },

    /// Training aborted because the loss left the finite range.
    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Diverged { epoch: u32, batch: usize, loss: f64 },

    /// Serialization framing problems (magic, version, truncation, counts).
    #[error("bad magic in {path}: expected {expected:?}, found {found:?}")]
    BadMagic {
        path: String,
        expected: [u8; 4],
        found: [u8; 4],
    },

    #[error("unsupported version {found} in {path} (supported: {supported})")]
    UnsupportedVersion {
        path: String,
        found: u32,
        supported: u32,
    },

    #[error("truncated file {path} while reading {what}")]
    Truncated { path: String, what: String },

    #[error("tensor count mismatch in {path}: header declares {declared}, config expects {expected}")]
    TensorCount {
        path: String,
        declared: u64,
        expected: u64,
    },

    #[error("checkpoint does not match model config: {0}")]
    CheckpointMismatch(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn shape(op: &'static str, details: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            details: details.into(),
        }
    }

    pub fn non_finite(op: &'static str, details: impl Into<String>) -> Self {
        Error::NonFinite {
            op,
            details: details.into(),
        }
    }

    pub fn invalid_value(op: &'static str, details: impl Into<String>) -> Self {
        Error::InvalidValue {
            op,
            details: details.into(),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn json(path: impl AsRef<std::path::Path>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
