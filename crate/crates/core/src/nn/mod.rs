//! Minimal CPU neural-network toolkit: `f64` tensors, a reverse-mode tape,
//! standard layers, AdamW and checkpoint serialization.

mod graph;
pub mod layers;
pub mod optim;
mod params;
mod tensor;

pub(crate) use graph::sigmoid;
pub use graph::{Gradients, Graph, Var};
pub use params::{randn, uniform, ParamGrads, ParamId, ParamStore};
pub use tensor::Tensor;
