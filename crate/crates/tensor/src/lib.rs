//! Tensors, convolution kernels and a tape-based reverse-mode autodiff engine
//! with support for differentiating through a gradient (double backward).

pub mod element;
pub mod error;
pub mod gradcheck;
pub mod kernels;
mod ops;
mod penalty;
mod tape;
mod tensor;

pub use element::{DType, Element};
pub use error::{Result, TensorError};
pub use kernels::Conv2dGeom;
pub use ops::concat;
pub use penalty::per_sample_grad_norm;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
