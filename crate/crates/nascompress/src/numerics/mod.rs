//! Dense-tensor arithmetic with reverse-mode gradients and Adam, generic over
//! the scalar element type.

pub mod checkpoint;
pub mod graph;
pub mod layers;
pub mod scalar;
pub mod store;
pub mod tensor;

pub use graph::{Graph, NodeId, LAYERNORM_EPS};
pub use scalar::Scalar;
pub use store::{AdamConfig, ParamStore};
pub use tensor::Tensor;
