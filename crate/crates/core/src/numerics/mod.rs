//! Tensors, reverse-mode differentiation, Adam and finite-difference checks.

mod adam;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{grad_check, grad_check_params, GradCheckReport};
pub use graph::{Backward, Graph, NodeId, OpKind, LAYER_NORM_EPS, PROB_CLAMP};
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::Tensor;
