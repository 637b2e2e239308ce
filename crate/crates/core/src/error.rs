use std::path::PathBuf;

/// Errors surfaced by the tracker core.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    /// A flow policy, mask or partition request that cannot be satisfied.
    #[error("policy error: {0}")]
    Policy(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("invalid input: {0}")]
    Input(String),

    /// Tracking failed for a frame; the tracker state is left untouched.
    #[error("tracking error: {0}")]
    Tracking(String),

    #[error("config error at `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("failed to read image {path}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
