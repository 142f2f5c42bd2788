//! Dense `f64` arrays, a reverse-mode differentiation graph and a
//! finite-difference checker.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{gradient_check, gradient_check_sampled, relative_error, GradCheckReport, DEFAULT_EPS};
pub use graph::{Gradients, Graph, Var};
pub use tensor::{log_add, log_softmax, logsumexp, matmul, softmax, Tensor};
