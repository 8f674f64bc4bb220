//! Dense tensors, reverse-mode autodiff, and the Adam optimizer.

mod adam;
pub mod checkpoint;
mod graph;
mod layers;
mod params;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use graph::{Gradients, Graph, Var};
pub use layers::{LayerNorm, Linear, Mlp};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
