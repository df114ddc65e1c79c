//! Core library for an encoder-decoder small-target segmentation network:
//! a reverse-mode autodiff graph over dense NCHW tensors, the specialized
//! convolution/wavelet/frequency/attention operators the architecture is
//! built from, training and evaluation, and file formats for tensors,
//! checkpoints, and images.
//!
//! Everything numeric is generic over the scalar type ([`Scalar`]: `f32` or
//! `f64`); training runs in `f32`, gradient verification in `f64`.

pub mod error;
pub mod freq;
pub mod gmea;
pub mod gradcheck;
pub mod gradsuite;
pub mod graph;
pub mod hlff;
pub mod layers;
pub mod mrffi;
pub mod net;
pub mod ops;
pub mod runtime;
pub mod scalar;
pub mod shape;
pub mod tensor;
pub mod wavelet;
pub mod wfed;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use graph::{Graph, Mode, ParamId, ParamStore, VarId};
pub use scalar::{Dtype, Scalar};
pub use shape::Shape;
pub use tensor::Tensor;

/// Single-precision tensor, the training workhorse.
pub type Tensor32 = Tensor<f32>;
/// Double-precision tensor, used by gradient verification.
pub type Tensor64 = Tensor<f64>;
