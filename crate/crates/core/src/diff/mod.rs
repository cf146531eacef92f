//! Minimal differentiable numerical core: dense tensors, a reverse-mode tape,
//! the primitives the model is built from, and a finite-difference checker.

mod gradcheck;
mod graph;
mod ops;
mod params;
mod real;
mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, Mismatch};
pub use graph::{Grads, Graph, Values, Var};
pub use ops::{argmax, laplacian_values};
pub use params::{fnv1a, Bound, ParamStore};
pub use real::{gemm, Layout, Real};
pub use tensor::Tensor;
