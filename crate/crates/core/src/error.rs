use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("{what} index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("{op}: empty input")]
    Empty { op: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A finite-difference perturbation changed some token's selected expert set.
    #[error("selection flipped for token {token} while perturbing {param}")]
    SelectionFlip { token: usize, param: String },

    #[error("training diverged at step {step} (loss {loss})")]
    Divergence { step: usize, loss: f64 },
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
