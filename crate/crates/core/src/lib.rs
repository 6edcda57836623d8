//! Blind image watermarking toolkit.
//!
//! A 256-bit payload is hidden in one Haar wavelet subband of a host image
//! by a small convolutional embedding network and recovered by a matching
//! extraction network. Training runs the whole chain (wavelet analysis,
//! embedding, a stochastic attack layer, extraction) end to end with a
//! hand-rolled reverse-mode gradient tape, so the crate has no deep-learning
//! framework dependency.
//!
//! Module map:
//! - [`tensor`]: dense f32 tensors, the carrier type for everything.
//! - [`ops`]: layer primitives (conv, transposed conv, batchnorm, pooling,
//!   activations) with explicit backward passes.
//! - [`graph`]: the gradient tape tying primitives into the fixed network.
//! - [`wavelet`]: single-level orthonormal 2D Haar analysis/synthesis.
//! - [`model`]: the 11-conv-layer embed/extract network and full pipelines.
//! - [`attacks`]: salt & pepper, Gaussian, JPEG, dropout distortions and the
//!   weighted attack sampler used during training.
//! - [`training`]: losses, Adam, the mini-batch training loop.
//! - [`metrics`]: PSNR, BER, and the evaluation sweep.
//! - [`io`]: image files, dataset listing, checkpoint serialization.

pub mod attacks;
pub mod error;
pub mod graph;
pub mod io;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod tensor;
pub mod training;
pub mod wavelet;

pub use error::{Error, Result};
pub use tensor::Tensor;
