use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("backward requires scalar, got shape {0:?}")]
    BackwardNonScalar(Vec<usize>),

    #[error("utterance too short for subsampling: {frames} frames, need at least 7")]
    TooShort { frames: usize },

    #[error("degenerate segment weight in segment {segment} (sum {sum:e})")]
    DegenerateSegment { segment: usize, sum: f64 },

    /// The frame sequence cannot embed the target under CTC's alignment rules.
    #[error("CTC incomputable at head `{head}`: {frames} frames, target needs {required}")]
    CtcIncomputable {
        head: String,
        frames: usize,
        required: usize,
    },

    #[error("brute-force CTC state space too large: {0} alignments")]
    StateSpaceTooLarge(u128),

    #[error("non-finite value {value} at perturbed coordinate {coordinate}")]
    NonFinite { coordinate: usize, value: f64 },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("parameter mismatch: {0}")]
    ParamMismatch(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn is_ctc_incomputable(&self) -> bool {
        matches!(self, Error::CtcIncomputable { .. })
    }

    /// Whether the error came from malformed input files rather than numerics or usage.
    pub fn is_format(&self) -> bool {
        matches!(
            self,
            Error::Format { .. } | Error::ParamMismatch(_) | Error::Io(_)
        )
    }
}
