//! Wavelet-frequency enhancement downsampling: a ×2 downsampler that splits
//! features into Haar subbands, sharpens the detail bands and smooths the
//! approximation band in the spectral domain, recalibrates both with
//! attention, and folds the result back onto a max-pool residual.

use rand::Rng;

use crate::error::{Error, Result};
use crate::freq::FrequencyMask;
use crate::graph::{ParamStore, VarId};
use crate::layers::{Conv2dLayer, Fwd, PixelAttention, SeBlock};
use crate::ops::{
    add, concat_channels, dft2_filter, haar_analyze_packed, haar_fuse_downsampled_packed, pool2d,
    sigmoid, slice_channels, Conv2dSpec, PoolKind,
};
use crate::scalar::Scalar;

/// The downsampling block. Input (N, C, H, W) with even H and W; output
/// (N, C, H/2, W/2).
///
/// Pipeline: entry 3×3 convolution → Haar analysis → the three detail bands
/// (stacked to 3C channels) pass a spectral high-pass, then a
/// squeeze-excitation path and a pixel-attention path each project to 3C/2
/// and concatenate back to 3C; the approximation band passes a spectral
/// low-pass, squeeze-excitation, and a sigmoid squash. The four enhanced
/// bands fuse into the half-resolution grid and a 2×2 max pool of the raw
/// input is added on top.
pub struct WfedBlock {
    channels: usize,
    entry: Conv2dLayer,
    se_high: SeBlock,
    pa_high: PixelAttention,
    mix_se: Conv2dLayer,
    mix_pa: Conv2dLayer,
    se_low: SeBlock,
    /// Squash the enhanced approximation band into (0, 1) to damp smooth
    /// background. On by default; probes switch it off to make the block
    /// reduce to a plain wavelet downsampler.
    pub low_sigmoid: bool,
    /// Replace both spectral masks with all-pass masks. Probing hook only.
    pub identity_masks: bool,
}

impl WfedBlock {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut impl Rng,
        name: &str,
        channels: usize,
    ) -> Result<Self> {
        if channels == 0 || channels % 2 != 0 {
            return Err(Error::Config(format!(
                "downsampling block needs an even, nonzero channel count, got {channels}"
            )));
        }
        let c3 = 3 * channels;
        Ok(WfedBlock {
            channels,
            entry: Conv2dLayer::new(
                store,
                rng,
                &format!("{name}.entry"),
                Conv2dSpec::same(channels, channels, 3, 3, 1),
            )?,
            se_high: SeBlock::new(store, rng, &format!("{name}.se_high"), c3)?,
            pa_high: PixelAttention::new(store, rng, &format!("{name}.pa_high"), c3)?,
            mix_se: Conv2dLayer::new(
                store,
                rng,
                &format!("{name}.mix_se"),
                Conv2dSpec::pointwise(c3, c3 / 2),
            )?,
            mix_pa: Conv2dLayer::new(
                store,
                rng,
                &format!("{name}.mix_pa"),
                Conv2dSpec::pointwise(c3, c3 / 2),
            )?,
            se_low: SeBlock::new(store, rng, &format!("{name}.se_low"), channels)?,
            low_sigmoid: true,
            identity_masks: false,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn forward<S: Scalar>(&self, f: &mut Fwd<S>, x: VarId) -> Result<VarId> {
        let shape = f.graph.value(x).shape();
        if shape.c != self.channels {
            return Err(Error::Dimension(format!(
                "downsampling block built for {} channels got {}",
                self.channels, shape.c
            )));
        }
        let c = self.channels;
        let entry = self.entry.forward(f, x)?;
        let packed = haar_analyze_packed(f.graph, entry)?;
        let low = slice_channels(f.graph, packed, 0, c)?;
        let high = slice_channels(f.graph, packed, c, 3 * c)?;

        let (bh, bw) = (shape.h / 2, shape.w / 2);
        let (high_mask, low_mask) = if self.identity_masks {
            (FrequencyMask::ones(bh, bw), FrequencyMask::ones(bh, bw))
        } else {
            (
                FrequencyMask::high_pass(bh, bw),
                FrequencyMask::low_pass(bh, bw),
            )
        };

        let high = dft2_filter(f.graph, high, &high_mask)?;
        let se_path = self.se_high.forward(f, high)?;
        let se_path = self.mix_se.forward(f, se_path)?;
        let pa_path = self.pa_high.forward(f, high)?;
        let pa_path = self.mix_pa.forward(f, pa_path)?;

        let low = dft2_filter(f.graph, low, &low_mask)?;
        let mut low = self.se_low.forward(f, low)?;
        if self.low_sigmoid {
            low = sigmoid(f.graph, low)?;
        }

        let packed_enhanced = concat_channels(f.graph, &[low, se_path, pa_path])?;
        let fused = haar_fuse_downsampled_packed(f.graph, packed_enhanced)?;
        let residual = pool2d(f.graph, x, PoolKind::Max)?;
        add(f.graph, fused, residual)
    }
}
