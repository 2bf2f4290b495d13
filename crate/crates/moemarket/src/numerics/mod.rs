//! Dense f64 tensor math with reverse-mode automatic differentiation.
//!
//! The training loop builds a fresh [`Tape`] per step, registers model
//! parameters as leaves, composes the forward graph out of matrix-level
//! operations, and calls [`Tape::backward`] on the scalar loss. Gradients are
//! read back per leaf and fed to [`adam_step`].
//!
//! Everything is 64-bit and sequential: replaying the same op sequence on the
//! same inputs is bit-identical within a platform.

mod adam;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamParams, AdamState};
pub use tape::{Tape, TensorId};
pub use tensor::{cross_entropy, softmax, Tensor};
