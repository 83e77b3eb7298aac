//! Raw numeric kernels on [`Tensor`](crate::Tensor) values. The tape layer
//! wraps these with gradient rules.

pub mod conv;
pub mod matmul;
pub mod shape;

pub use conv::{conv2d, conv2d_input_grad, conv2d_weight_grad, Conv2dGeom};
pub use matmul::matmul;
pub use shape::{broadcast_to, concat, flip, pad_axis, slice_axis, sum_to};
