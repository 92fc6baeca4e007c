//! Minimal differentiable engine: the layer kinds needed by the built-in
//! topologies, backpropagation, and plain SGD.

pub mod container;
mod layer;
mod linalg;
mod network;
mod ops;

pub use layer::{infer_shapes, Layer, LayerConfig};
pub use network::{backward, sgd_step, sgd_update, Gradients, LossKind, Network, ParamGradient};
pub use ops::{conv2d_forward, dense_forward, maxpool_forward, Padding};
