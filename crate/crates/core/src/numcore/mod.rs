//! Dense tensor math, reverse-mode differentiation and the optimizer.

pub mod graph;
pub mod optim;
pub mod scalar;
pub mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use optim::{adamw_step, cosine_lr, AdamWConfig, CosineSchedule, OptimizerState};
pub use scalar::Scalar;
pub use tensor::{Role, TensorRecord};
