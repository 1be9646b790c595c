use alloc::boxed::Box;
use alloc::string::String;

/// Errors produced by the depth-propagation core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("dimension mismatch: expected {expected:?}, got {got:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("degenerate point triple (collinear or coincident)")]
    DegenerateTriple,
    #[error("ray grazes the plane (|n.e| below tolerance)")]
    GrazingRay,
    #[error("plane intersection lies behind the camera")]
    BehindCamera,
    #[error("superpixel {superpixel} is degenerate (too few or collinear pixels)")]
    DegenerateSuperpixel { superpixel: usize },
    #[error("no usable depth prior for superpixel {superpixel}")]
    UnusablePrior { superpixel: usize },
    #[error("non-finite value encountered at solver iteration {iteration}")]
    NumericalFailure { iteration: usize },
    #[error("non-finite pairwise cost on edge ({0}, {1})")]
    NonFiniteCost(usize, usize),
    #[error("no mutually valid pixels to evaluate")]
    EmptyEvaluation,
    #[error("frame {frame}: {inner}")]
    AtFrame { frame: usize, inner: Box<Error> },
}

impl Error {
    /// The underlying error with any frame annotation stripped.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtFrame { inner, .. } => inner.root(),
            e => e,
        }
    }

    pub fn at_frame(self, frame: usize) -> Error {
        Error::AtFrame { frame, inner: Box::new(self) }
    }
}

pub type Result<T> = core::result::Result<T, Error>;
