//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every op in execution order, so node indices are a
//! topological order by construction. Gradients live on the tape nodes;
//! parameters are copied onto a fresh tape for each forward pass.

pub mod kernels;
mod tape;

pub use tape::{Tape, Var, DICE_SMOOTH, LOG_FLOOR};
