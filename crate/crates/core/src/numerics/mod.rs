//! Dense tensors, forward kernels, reverse-mode gradients, Adam and the
//! cosine learning-rate schedule.

pub mod gradcheck;
pub mod graph;
pub mod ops;
pub mod optim;
mod params;
mod scalar;
mod tensor;

pub use gradcheck::{finite_difference_gradcheck, GradCheckReport, ParamSubset};
pub use graph::{Gradients, Graph, OpKind, Var};
pub use ops::{channel_norm_forward, conv2d_forward, global_avg_pool, linear_forward, relu_forward};
pub use optim::{adam_step, cosine_anneal_lr, OptimizerState};
pub use params::ParamStore;
pub use scalar::{sigmoid, softplus, Scalar};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("contract violation: {0}")]
    Contract(String),
}
