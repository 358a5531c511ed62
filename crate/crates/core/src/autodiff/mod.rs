//! Dense `f64` tensors with define-by-run reverse-mode differentiation.

pub mod checkpoint;
mod graph;
pub mod kernels;
mod optim;
mod params;
mod tensor;

pub use graph::{backward_calls, Graph, Var};
pub use optim::{sgd_step, Adam, AdamConfig, Optimizer, OptimizerKind};
pub use params::{GradStore, ParamStore};
pub use tensor::Tensor;
