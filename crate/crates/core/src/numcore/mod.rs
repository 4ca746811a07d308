//! Dense tensors, reverse-mode autodiff and the Adam optimizer.

mod graph;
mod optim;
mod scalar;
mod tensor;

pub(crate) use graph::{gelu_fwd, LN_EPS};
pub use graph::{Gradients, Graph, Var};
pub use optim::{adam_step, grad_l2_norm, AdamConfig, AdamState, GradMap, ParamSet};
pub use scalar::Scalar;
pub(crate) use scalar::{gemm, MatRef};
pub use tensor::Tensor;
