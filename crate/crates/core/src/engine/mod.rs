//! Reverse-mode differentiation engine: tensors, the recorded graph,
//! named parameter sets and the Adam optimizer.

mod adam;
mod graph;
mod kernels;
mod params;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use graph::{Gradients, Graph, Var};
pub use params::{glorot_uniform, Param, ParamSet};
pub use tensor::Tensor;
