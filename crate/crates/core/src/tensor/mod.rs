//! Dense tensors, the differentiation tape, and the numeric plumbing around them.

pub mod container;
pub mod gradcheck;
mod graph;
pub mod kernels;
pub mod optim;
mod param;
mod real;
mod value;

pub use graph::{Gradients, Graph, Var};
pub use param::{InitKind, ParamBuilder, ParamId, ParamStore, Parameter};
pub use real::{DType, Real};
pub use value::Tensor;
