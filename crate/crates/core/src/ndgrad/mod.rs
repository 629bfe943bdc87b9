//! Dense tensors and a tape-based reverse-mode autodiff engine.

mod graph;
mod tensor;

pub(crate) use graph::matmul_raw;
pub use graph::{softmax_tensor, Graph, NodeId};
pub use tensor::Tensor;
