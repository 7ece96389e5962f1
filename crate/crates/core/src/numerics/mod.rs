//! Dense `f64` tensors, reverse-mode differentiation, gradient checking and
//! the AdamW optimizer.

mod graph;
mod gradcheck;
mod layers;
mod params;
mod tensor;

pub use graph::{Adjoints, Axis, Graph, Var};
pub use gradcheck::{finite_diff_check, relative_error, GradCheckReport, REL_ERR_FLOOR};
pub use layers::{affine_relu_stack, Linear, Mlp, Norm, NormKind, NormMlp, NORM_EPS};
pub use params::{AdamW, Gradients, ParamId, ParamStore};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
