//! Differentiable N-dimensional arrays.
//!
//! [`Tensor`] holds values; [`Tape`] and [`Var`] record operations on them and
//! produce reverse-mode gradients. [`gradcheck`] verifies every gradient rule
//! against central finite differences.

pub mod gradcheck;
pub mod init;
pub(crate) mod kernels;
mod ops;
mod scalar;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, required_op_set, GradCheckReport, OpDescriptor};
#[allow(unused_imports)]
pub(crate) use ops::{sigmoid, softmax_in_place};
pub use scalar::{DType, Real};
pub use tape::{CustomOp, Gradients, Tape, TraceEntry, Var};
pub use tensor::{numel, strides, Tensor};
