//! Numeric forward/backward kernels over [`Tensor`](crate::tensor::Tensor)s.
//!
//! Everything here is a pure function; the autodiff tape in
//! [`crate::autograd`] stitches them together.

pub mod conv;
mod gemm;
pub mod pointwise;
pub mod spectral;
pub mod strip;

pub use conv::{conv2d, conv_transpose2d, ConvSpec};
pub use pointwise::{gelu, layer_norm_channels, softmax_channels};
pub use strip::{strip_apply, StripAxis};
