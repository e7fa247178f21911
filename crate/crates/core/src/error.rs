use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A single axis disagrees with what an operation expected.
    #[error("{op}: dimension mismatch on {axis} axis (expected {expected}, got {actual})")]
    Dimension {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    Shape {
        op: String,
        left: [usize; 4],
        right: [usize; 4],
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalar([usize; 4]),

    #[error("recorded graph has a cycle at node {0}")]
    Cycle(usize),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("mask: {0}")]
    Mask(String),

    #[error("network: {0}")]
    Network(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("training aborted at iteration {iteration}: {reason}")]
    Training { iteration: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
