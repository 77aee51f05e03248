//! Dense arrays and a reverse-mode differentiation tape.

mod array;
pub mod gradcheck;
mod graph;
mod params;
mod scalar;

pub use array::Tensor;
pub use graph::{EmptyRows, Gradients, Graph, Mask, Var, MASK_NEG};
pub use params::{ParamGrads, ParamId, ParamStore};
pub use scalar::{gemm, lit, DType, Float};
