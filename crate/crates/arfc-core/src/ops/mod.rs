//! Differentiable operations.
//!
//! Each op is a free function that computes the forward value eagerly and
//! records a node whose boxed closure-free adjoint implements the backward
//! pass. Heavy kernels live beside their ops; tests compare them against
//! independent brute-force reference implementations.

mod arith;
mod conv;
mod deform;
mod dft;
mod haar;
mod norm;
mod pool;
mod resize;
mod softiou;

pub use arith::{
    add, add_bias, broadcast_channels, broadcast_spatial, concat_channels, mul, permute_channels,
    relu, scale, sigmoid, slice_channels, softmax_channels, sum_all,
};
pub use conv::{conv2d, Conv2dSpec, Padding};
pub use deform::deform_conv2d;
pub use dft::dft2_filter;
pub use haar::{haar_analyze_packed, haar_fuse_downsampled_packed, haar_synthesize_packed};
pub(crate) use haar::{haar_analyze_kernel, haar_fuse_kernel, haar_synthesize_kernel};
pub use norm::{batch_norm, layer_norm, BatchNormRunning, BN_EPS, LN_EPS};
pub use pool::{global_pool, pool2d, GlobalPoolKind, PoolKind};
pub use resize::bilinear_upsample_x2;
pub use softiou::soft_iou_loss;
