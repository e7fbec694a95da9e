//! Dense tensors with tape-based reverse-mode automatic differentiation.
//!
//! The substrate is deliberately small: every operation a compact transformer
//! needs (matrix products, row-wise softmax with additive masking, layer
//! normalization, GELU, grouped 1-D convolution, embedding gathers and the
//! usual losses) is implemented once, generically over `f32` and `f64`.
//! Shapes are checked eagerly and any non-finite value produced by an
//! operation is reported as an error instead of propagating silently.

mod error;
mod float;
pub mod gradcheck;
mod graph;
mod kernels;
mod param;
mod tensor;

pub use error::{NumericsError, Result};
pub use float::Float;
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport, ParamCheck};
pub use graph::{Graph, Padding, Var, MASKED};
pub use param::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
