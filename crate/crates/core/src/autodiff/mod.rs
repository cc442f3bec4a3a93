//! Dense tensors with define-by-run reverse-mode differentiation.
//!
//! Everything is `f64`. A [`Graph`] records every op as it runs; calling
//! [`Graph::backward`] on a scalar sweeps the record in reverse.

mod check;
mod graph;
mod tensor;

pub use check::{central_difference, max_relative_error};
pub use graph::{log_sum_exp, Gradients, Graph, Var};
pub use tensor::Tensor;
