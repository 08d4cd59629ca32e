//! Dense matrix kernel, seeded random streams and finite-difference oracles.

mod finite_diff;
mod matrix;
mod rng;

pub use finite_diff::{
    finite_diff_gradient, finite_diff_hessian_diag, finite_diff_hessian_diag_subset, rademacher_vector,
    relative_error, relative_error_scalar, GRAD_STEP, HESS_STEP,
};
pub use matrix::{dot, norm_sq, Matrix};
pub use rng::Rng;
