//! Dense `f64` tensors, tape-based reverse-mode differentiation and Adam.

mod adam;
mod gradcheck;
mod graph;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::finite_diff_check;
pub use graph::{Gradients, Graph, Var};
pub use tensor::{cosine_sim, l2_norm, l2_normalize, Tensor, NORM_EPS};

pub(crate) use graph::logsumexp;
