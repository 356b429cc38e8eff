//! Dense tensors with an eager, optionally taped, reverse-mode engine.

mod gradcheck;
mod graph;
mod kernels;
mod tensor;

pub use gradcheck::{grad_check, grad_check_with_floor, GradCheckReport, ParamCheck, DEFAULT_ABS_FLOOR};
pub use graph::{Gradients, Graph, NodeId};
pub use tensor::Tensor;
