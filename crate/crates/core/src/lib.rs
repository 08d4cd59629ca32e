//! Adversarially robust training with analytic trace-of-Hessian
//! regularization of the top layer, plus the finite-difference machinery
//! that checks every closed form against ground truth.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod attacks;
pub mod autodiff;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod hessian_oracle;
pub mod losses;
pub mod measure;
pub mod network;
pub mod numerics;
pub mod pacbayes;
pub mod theorem4;
pub mod trainer;
pub mod trh;
pub mod verify;

pub use error::{Error, Result};
pub use network::{DenseLayer, ForwardTrace, MlpNetwork};
pub use numerics::{Matrix, Rng};
