use std::fmt;

/// Errors raised by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{0}")]
    InvalidArgument(String),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this graph; call reset_grads() before running it again")]
    BackwardAlreadyRun,
    #[error("non-finite value encountered at coordinate {index}")]
    NonFinite { index: usize },
    #[error("malformed {what} at byte offset {offset}: {msg}")]
    Format {
        what: &'static str,
        offset: usize,
        msg: String,
    },
    #[error("training diverged: non-finite loss at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl fmt::Display) -> Self {
        Error::InvalidArgument(msg.to_string())
    }
}
