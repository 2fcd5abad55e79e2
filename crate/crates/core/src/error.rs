use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Operand shapes do not fit together.
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A hyperparameter or layer configuration is not usable.
    #[error("configuration error: {0}")]
    Config(String),
    /// A caller broke an API contract (e.g. backward from a non-scalar).
    #[error("contract error: {0}")]
    Contract(String),
    /// Labels or samples out of range.
    #[error("data error: {0}")]
    Data(String),
    /// Training produced a non-finite loss.
    #[error("non-finite loss at epoch {epoch}, step {step} (batch seed {batch_seed:#018x})")]
    NonFinite {
        epoch: usize,
        step: usize,
        batch_seed: u64,
    },
    /// A checkpoint does not match the model it is loaded into.
    #[error("parameter mismatch for '{name}': {reason}")]
    ParamMismatch { name: String, reason: String },
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
