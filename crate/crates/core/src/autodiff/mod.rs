//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The operation set is deliberately small: matrix products, elementwise
//! arithmetic, ReLU, concatenation, row selection, squared Euclidean
//! distance, softmax over negated entries, clamped logarithm, reciprocal and
//! reductions. That is enough for every loss used by the learner.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{softmax_neg_values, Tape, Var};
pub use tensor::Tensor;
