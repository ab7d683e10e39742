use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PspError {
    #[error("dimension mismatch in {op}: expected {expected}, got {got}")]
    DimensionMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("dimension must be at least 1")]
    ZeroDimension,
    #[error("matrix is rank deficient (|R[{index},{index}]| = {value:e})")]
    RankDeficient { index: usize, value: f64 },
    #[error("context family mismatch: {0} vs {1}")]
    FamilyMismatch(String, String),
    #[error("{family} keys cannot bind a real-valued vector; lift it to complex first")]
    RealBindingUnsupported { family: String },
    #[error("unknown binding family `{0}`")]
    UnknownFamily(String),
    #[error("no context registered for task {0}")]
    UnknownTask(usize),
    #[error("key is not stored in the ledger")]
    KeyNotStored,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("malformed serialized data: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, PspError>;

pub(crate) fn mismatch(op: &'static str, expected: impl ToString, got: impl ToString) -> PspError {
    PspError::DimensionMismatch {
        op,
        expected: expected.to_string(),
        got: got.to_string(),
    }
}
