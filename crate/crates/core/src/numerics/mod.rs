//! Dense linear algebra, reverse-mode gradients, Adam and a finite-difference
//! gradient checker. All learnable pieces of the model are built on this.

mod adam;
pub mod gradcheck;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use tape::{Tape, Var};
pub use tensor::{dot, sigmoid, softplus, SparseMatrix, Tensor, NORM_EPS};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericsError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("expected a scalar, got a {0}x{1} tensor")]
    NotScalar(usize, usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}
