use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("sequence too short to pool")]
    TooShortToPool,
    #[error("cannot distill length-1 sequence")]
    CannotDistill,
    #[error("empty attention row {row}")]
    EmptyAttentionRow { row: usize },
    #[error("stamp index out of range: {category} = {value} (vocabulary {vocab})")]
    StampOutOfRange {
        category: &'static str,
        value: usize,
        vocab: usize,
    },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("missing gradient for parameter `{0}`")]
    MissingGrad(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),
    #[error("zero variance in column `{0}`")]
    ZeroVariance(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}, lr {lr:e}")]
    NonFiniteLoss { epoch: usize, batch: usize, lr: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
