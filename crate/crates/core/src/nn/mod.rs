//! Minimal CPU tensor engine: tensors, named parameters, a recording graph
//! with reverse-mode gradients, and the Adam optimiser.

mod graph;
pub mod layers;
mod optim;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, NodeId, Taps};
pub use optim::Adam;
pub use params::{load_weights, save_weights, ParamId, ParamStore};
pub use tensor::Tensor;
