use thiserror::Error;

use crate::access::AccessKey;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RuntimeError {
    #[error("access list names key {0} more than once")]
    DuplicateKey(AccessKey),
    #[error("invalid unroll factor {unroll} for {iterations} iterations")]
    InvalidUnroll { unroll: u64, iterations: u64 },
    #[error("a taskiter needs at least one iteration")]
    ZeroIterations,
    #[error("taskiters cannot be nested")]
    NestedTaskiter,
    #[error("unsupported taskiter options: {0}")]
    UnsupportedOptions(&'static str),
    #[error("iteration {iteration} created a different task graph than the recorded one ({detail})")]
    ShapeMismatch { iteration: u64, detail: String },
}
