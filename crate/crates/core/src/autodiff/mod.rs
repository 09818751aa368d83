//! Reverse-mode automatic differentiation over `f64` tensors, with
//! gradient-of-gradient support.

mod graph;
mod params;
mod tensor;

pub use graph::{Graph, Var};
pub use params::{fetch, grad, ParamSet, VarMap};
pub use tensor::Tensor;
