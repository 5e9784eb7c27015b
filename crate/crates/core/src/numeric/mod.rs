//! Dense f32 tensors and a reverse-mode autodiff tape.

pub mod graph;
pub mod kernels;
pub mod tensor;

pub use graph::{BackwardReport, Graph, GraphStats, Var, ATTENTION_MASK};
pub use tensor::Tensor;
