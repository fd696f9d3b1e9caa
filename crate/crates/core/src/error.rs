use alloc::string::String;
use alloc::vec::Vec;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{0}: empty input")]
    EmptyInput(&'static str),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("slice rows {r0}..{r1}, cols {c0}..{c1} out of range for a {h}x{w} map")]
    SliceOutOfRange {
        r0: usize,
        r1: usize,
        c0: usize,
        c1: usize,
        h: usize,
        w: usize,
    },
    #[error("missing id `{0}`")]
    MissingId(String),
    #[error("unknown parameter `{0}`")]
    MissingParam(String),
    #[error("out-of-vocabulary token `{0}`")]
    OutOfVocabulary(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("infeasible synthetic spec: {0}")]
    InfeasibleSpec(String),
    #[error("non-finite loss at step {step}; largest gradient norm {norm} in `{param}`")]
    NonFinite { step: u64, param: String, norm: f64 },
    #[error("gradient check failed for `{group}`: relative error {error:e} exceeds {tolerance:e}")]
    GradCheck {
        group: String,
        error: f64,
        tolerance: f64,
    },
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
