//! Dense tensors with reverse-mode automatic differentiation.

mod graph;
pub(crate) mod tensor;

pub use graph::{Graph, NodeId};
pub use tensor::Tensor;
