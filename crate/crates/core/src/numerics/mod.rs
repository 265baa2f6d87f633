//! Dense matrices, explicit per-op gradients and seeded random streams.
//!
//! There is no tape: every differentiable op has a `*_backward` partner that
//! maps an upstream gradient to input gradients, and callers compose them.
//! [`finite_difference_grad`] is the oracle all of those are checked against.

mod matrix;
mod rng;

pub use matrix::{
    cross_entropy_rows, cross_entropy_rows_backward, finite_difference_grad, l2_normalize_rows,
    l2_normalize_rows_backward, log_softmax_rows, log_softmax_rows_backward, matmul,
    matmul_backward, relative_error, softmax_rows, softmax_rows_backward, Matrix,
};
pub use rng::Rng;
