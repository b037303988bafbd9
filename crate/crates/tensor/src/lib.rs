//! Minimal dense tensors with define-by-run reverse-mode differentiation.
//!
//! The operator set is deliberately small: convolution, affine maps,
//! activations, softmax, bilinear sampling, pooling, and the shape and
//! elementwise plumbing a transformer needs. Everything runs on one thread in
//! a fixed reduction order, so forward and backward passes are bit
//! reproducible.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod kernels;
pub mod param;
pub mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Activation, Gradients, Graph, Var};
pub use param::{adamw_step, clip_grad_norm, grad_norm, AdamW, Param, ParamId, ParamStore};
pub use tensor::{Scalar, Tensor};
