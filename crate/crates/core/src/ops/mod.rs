//! Forward and backward kernels. These work on plain tensors; the [`Tape`](crate::Tape)
//! records them and wires up the backward pass.

pub mod conv;
pub mod elementwise;
pub mod pool;

pub use elementwise::{BatchNormConfig, Mode, RunningStats};
