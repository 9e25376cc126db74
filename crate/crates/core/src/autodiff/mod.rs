//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Only the operations needed by the student networks, the distillation
//! losses and the setting encoder are provided. A [`Graph`] is built fresh for
//! every forward pass; parameters live outside it and are inserted as leaves.

mod graph;
mod optim;
mod tensor;

pub use graph::{kl_divergence, softmax, softmax_in_place, Graph, Var, LOG_FLOOR};
pub use optim::{Optimizer, OptimizerKind};
pub use tensor::Tensor;
