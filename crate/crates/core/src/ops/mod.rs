//! Layer primitives with explicit forward and backward implementations.
//!
//! Every function here is pure: outputs depend only on the arguments, and
//! gradients are vector-Jacobian products computed from saved forward data.

pub mod activation;
pub mod batchnorm;
pub mod concat;
pub mod conv;
pub mod pool;

pub use activation::{relu, sigmoid, tanh};
pub use batchnorm::{batchnorm_infer, batchnorm_train, BatchNormParams, BnCache};
pub use concat::concat_channels;
pub use conv::{conv2d, conv_transpose2d, ConvLayerParams, Padding};
pub use pool::avgpool2d;
