//! Reverse-mode automatic differentiation over [`Tensor`](crate::Tensor)s.
//!
//! A [`Tape`] records every op of a forward pass; [`Tape::backward`] replays
//! the record in reverse and accumulates gradients into each leaf, summing
//! over repeated uses of the same variable.

mod kernels;
mod ops;
mod tape;

pub use ops::{concat_channels, ElementwiseOp};
pub use tape::{Gradients, Tape, Var};

#[cfg(test)]
mod tests;
