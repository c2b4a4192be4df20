//! Dense tensors, reverse-mode differentiation and small linear algebra.

mod gradcheck;
mod graph;
pub mod linalg;
mod optim;
mod param;
mod tensor;

pub use gradcheck::{grad_check, grad_check_params, GradCheckReport};
pub use graph::{forward_backward, Gradients, Graph, Var};
pub use optim::{clip_grad_norm, Adam, CosineSchedule};
pub use param::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NumError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value produced by `{op}` (node {index})")]
    NonFinite { op: &'static str, index: usize },
    #[error("finite-difference step {0} is below 1e-10")]
    StepTooSmall(f64),
}
