//! Minimal f64 tensors and a reverse-mode tape.
//!
//! Operations cover what small convolutional/attention networks and their
//! losses need: broadcasting arithmetic, convolutions, matmul, row softmax,
//! index gathers (used for padding, resampling and neighbour lookups), and
//! leading-axis concat/slice.

pub mod gradcheck;
mod graph;
mod tensor;

pub use graph::{Conv2dSpec, Gradients, Graph, Var, GATHER_ZERO};
pub use tensor::{Tensor, TensorError};
