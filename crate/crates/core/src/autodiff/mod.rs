//! Dense-matrix reverse-mode differentiation and the AdamW optimizer.
//!
//! Every forward call records onto a fresh [`Tape`]; parameters enter as
//! leaves copied from the network, and [`Tape::backward`] returns gradients
//! keyed by [`Var`] which the caller folds back into the owning tensors.

mod adamw;
mod tape;
mod tensor;

pub use adamw::{AdamSlot, AdamW, Parameter};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
