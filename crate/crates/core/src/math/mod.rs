//! Dense tensors, reverse-mode differentiation and the RMSProp optimizer.

mod graph;
mod optim;
mod tensor;

pub use graph::{Axis, Gradients, Graph, NodeId};
pub use optim::{RmsProp, RmsPropConfig};
pub use tensor::Tensor;


#[derive(Debug, thiserror::Error)]
pub enum MathError {
    #[error("shape mismatch at {node}: {detail}")]
    Shape { node: String, detail: String },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape {
        shape: Vec<usize>,
        reason: &'static str,
    },
    #[error("loss node {node} is not scalar (shape {shape:?})")]
    NonScalarLoss { node: String, shape: Vec<usize> },
    #[error("non-finite gradient for parameter `{0}`; step refused")]
    NonFiniteGradient(String),
    #[error("no gradient or state for parameter `{0}`")]
    MissingParameter(String),
}
