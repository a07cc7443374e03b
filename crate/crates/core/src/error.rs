//! Error type shared by every module of the core crate.

use alloc::string::String;

use crate::model::Side;

/// Result alias for fallible core operations.
pub type Result<T> = core::result::Result<T, Error>;

/// Failures raised by configuration, expectation, gradient and ODE code.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("encoder orthonormalization stayed degenerate after {attempts} attempts")]
    DegenerateEncoders { attempts: u32 },

    #[error("feature normalizer of side {side} collapsed to {value:e}")]
    Collapse { side: Side, value: f64 },

    #[error("exact enumeration needs {required} evaluations but the budget is {budget}")]
    BudgetExceeded { required: u128, budget: u128 },

    #[error("column {index} of {matrix} has zero norm")]
    DegenerateColumn { matrix: &'static str, index: usize },

    #[error("infinite-width state is degenerate: {0}")]
    DegenerateState(&'static str),

    #[error("step size halved {halvings} times at t = {time} without restoring positivity")]
    Stiffness { time: f64, halvings: u32 },

    #[error("comparison precondition violated at sample {index}: {reason}")]
    Inapplicable { index: usize, reason: &'static str },
}
