//! Context-aware convolutional image restoration.
//!
//! Star-operation residual blocks, dynamic strip attention, a six-scale
//! multi-input/multi-output U-shaped backbone, the dual-domain L1 loss, and
//! a training/evaluation harness over synthetic degradations. All arithmetic
//! is `f64` with hand-written backward passes recorded on an
//! [`autograd::Tape`].

pub mod autograd;
pub mod backbone;
pub mod blocks;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod kernels;
pub mod loss;
pub mod metrics;
pub mod params;
pub mod rsam;
pub mod strip_attention;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{FeatureMap, Tensor};
