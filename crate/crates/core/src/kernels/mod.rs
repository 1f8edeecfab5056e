//! Raw forward and backward kernels over [`Tensor`](crate::tensor::Tensor).
//!
//! These functions know nothing about the tape; [`crate::autograd`] wires
//! them together.

pub mod conv;
pub mod norm;
pub mod pointwise;
pub mod pool;
pub mod resample;

pub use conv::{conv3d, conv_transpose3d, ConvGeom};
pub use norm::{group_norm, GN_EPS};
pub use pointwise::{concat_channels, linear, slice_channels, softmax_channels};
pub use pool::{gap3d, maxpool3d};
pub use resample::trilinear_resample;
