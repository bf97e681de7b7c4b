//! Dense matrices, Cholesky-based linear algebra and reverse-mode
//! differentiation.

mod graph;
pub mod linalg;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub(crate) use graph::sigmoid;
pub use tensor::Tensor;
