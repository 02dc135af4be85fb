//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records primitive applications in the order they are executed,
//! which is already a topological order. [`Tape::backward`] walks it in reverse
//! once and returns the gradient of a scalar with respect to every leaf that
//! was registered with `requires_grad`.
//!
//! The primitive set is deliberately small: exactly what the GCN encoder, the
//! MLP predictors, the regularised reconstruction loss and the linear probe
//! need.

pub mod checkpoint;
pub mod gradcheck;
mod tape;

pub use tape::{Gradients, Primitive, Tape, Var};
