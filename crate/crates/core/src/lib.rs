//! Numerical core of the `sarseg` toolkit: differentiable tensors, the
//! windowed-attention encoder with its pyramid decoder, class-imbalance
//! losses, mixed-mask pretraining, evaluation metrics and optimizer
//! schedules.
//!
//! The crate is `no_std` (it needs `alloc`). File formats, training loops and
//! the command line live in the `sarseg` crate.
#![cfg_attr(not(feature = "std"), no_std)]
// `!(x >= 0.0)` is used on purpose so NaN fails validation; kernels index
// several parallel buffers with one loop variable.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

extern crate alloc;

pub mod datagen;
pub mod engine;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod pretrain;
pub mod sampling;

pub use error::{Error, Result};
