//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The engine records every operation on an append-only [`Tape`]. Backward
//! passes emit the same primitive operations, which makes gradients
//! differentiable in turn: second-order quantities (curvature-vector
//! products, mixed parameter/weight derivatives, differentiating through
//! unrolled optimizer steps) fall out of repeated calls to [`grad`].
//!
//! All arithmetic is 64-bit; the iterative curvature solvers downstream
//! are far too sensitive to run in single precision.

mod grad;
mod ops;
mod tape;

pub use grad::{dot_with_data, grad, hvp, mixed_second_grad};
pub use ops::concat;
pub use tape::{Tape, TensorData, Var};
