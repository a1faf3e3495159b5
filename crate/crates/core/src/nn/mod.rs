//! Minimal tensor, autodiff and optimizer stack behind the networks.

pub mod checkpoint;
pub mod graph;
pub mod layers;
pub mod ops;
pub mod params;
pub mod tensor;
pub mod train;

pub use graph::{Graph, NodeId};
pub use layers::{Conv, Dense};
pub use ops::ConvGeom;
pub use params::{Adam, Grads, ParamId, ParamSet};
pub use tensor::Tensor;
pub use train::{LossCurve, OptimConfig};
