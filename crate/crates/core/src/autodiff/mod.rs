//! Minimal reverse-mode automatic differentiation over dense f64 arrays.
//!
//! Define-by-run: a [`Tape`] records every operation as it executes, and
//! [`Var::backward`] replays the records in exact reverse order, accumulating
//! gradients into each node. Tapes are rebuilt every forward pass and are
//! single-threaded; plain [`Tensor`] values hold parameters between steps.

mod tape;
mod tensor;

pub use tape::{Tape, Var, LAYERNORM_EPS};
pub use tensor::Tensor;
