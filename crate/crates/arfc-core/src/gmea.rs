//! Global median enhancement attention: channel attention from three pooled
//! descriptors (average, max, median) through a shared bottleneck MLP, a
//! fixed channel shuffle, and a multi-directional depthwise spatial
//! attention whose strip kernels shrink to fit small feature maps.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Op, ParamId, ParamStore, VarId};
use crate::layers::{kaiming_uniform, ChannelMlp, Conv2dLayer, Fwd};
use crate::ops::{
    add, broadcast_channels, conv2d, global_pool, mul, permute_channels, sigmoid, Conv2dSpec,
    GlobalPoolKind,
};
use crate::scalar::Scalar;
use crate::shape::Shape;
use crate::tensor::Tensor;

/// Channel groups of the shuffle stage.
pub const SHUFFLE_GROUPS: usize = 4;

/// Strip lengths of the spatial branches; each length contributes a
/// horizontal (1×L) and a vertical (L×1) depthwise convolution.
pub const STRIP_LENGTHS: [usize; 3] = [7, 11, 21];

/// The permutation computed by reshaping channels to (groups, C/groups),
/// transposing, and flattening: output channel `u·g + v` reads input channel
/// `v·(C/g) + u`.
pub fn shuffle_permutation(channels: usize, groups: usize) -> Result<Vec<usize>> {
    if groups == 0 || channels % groups != 0 {
        return Err(Error::Config(format!(
            "cannot shuffle {channels} channels in {groups} groups"
        )));
    }
    let per = channels / groups;
    let mut perm = Vec::with_capacity(channels);
    for u in 0..per {
        for v in 0..groups {
            perm.push(v * per + u);
        }
    }
    Ok(perm)
}

// ---------------------------------------------------------------------------
// Central kernel crop (for strips wider than the feature map)
// ---------------------------------------------------------------------------

/// Crop the central (kh, kw) window out of a conv weight's spatial dims.
/// Linear gather; the adjoint scatters the gradient back into the window.
struct CropKernelCenterOp {
    kh: usize,
    kw: usize,
}

impl<S: Scalar> Op<S> for CropKernelCenterOp {
    fn name(&self) -> &'static str {
        "crop_kernel_center"
    }

    fn backward(
        &self,
        parents: &[Tensor<S>],
        _output: &Tensor<S>,
        grad: &Tensor<S>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<S>>>> {
        if !needs[0] {
            return Ok(vec![None]);
        }
        let ws = parents[0].shape();
        let (dy, dx) = ((ws.h - self.kh) / 2, (ws.w - self.kw) / 2);
        let mut gw = Tensor::zeros(ws);
        for o in 0..ws.n {
            for i in 0..ws.c {
                for y in 0..self.kh {
                    for x in 0..self.kw {
                        gw.set(o, i, dy + y, dx + x, grad.get(o, i, y, x));
                    }
                }
            }
        }
        Ok(vec![Some(gw)])
    }
}

fn crop_kernel_center<S: Scalar>(
    g: &mut Graph<S>,
    w: VarId,
    kh: usize,
    kw: usize,
) -> Result<VarId> {
    let ws = g.value(w).shape();
    if kh > ws.h || kw > ws.w || (ws.h - kh) % 2 != 0 || (ws.w - kw) % 2 != 0 {
        return Err(Error::Dimension(format!(
            "cannot crop {kh}×{kw} centrally from a {}×{} kernel",
            ws.h, ws.w
        )));
    }
    let (dy, dx) = ((ws.h - kh) / 2, (ws.w - kw) / 2);
    let wv = g.value(w);
    let out = Tensor::from_fn(Shape::new(ws.n, ws.c, kh, kw), |o, i, y, x| {
        wv.get(o, i, dy + y, dx + x)
    });
    g.push_op(out, vec![w], Box::new(CropKernelCenterOp { kh, kw }))
}

/// Largest usable odd kernel length: the nominal length when the axis is big
/// enough, otherwise the axis size rounded down to odd.
fn clamp_odd(nominal: usize, dim: usize) -> usize {
    if dim >= nominal {
        nominal
    } else if dim % 2 == 1 {
        dim
    } else {
        (dim - 1).max(1)
    }
}

/// One depthwise strip convolution at nominal size (kh, kw), shrunk to the
/// feature map when it is smaller by using the central taps only.
struct StripConv {
    weight: ParamId,
    kh: usize,
    kw: usize,
}

impl StripConv {
    fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut impl Rng,
        name: &str,
        channels: usize,
        kh: usize,
        kw: usize,
    ) -> Result<Self> {
        let weight = kaiming_uniform(rng, Shape::new(channels, 1, kh, kw), kh * kw);
        Ok(StripConv {
            weight: store.register(format!("{name}.weight"), weight, true)?,
            kh,
            kw,
        })
    }

    fn forward<S: Scalar>(&self, f: &mut Fwd<S>, x: VarId) -> Result<VarId> {
        let xs = f.graph.value(x).shape();
        let (eh, ew) = (clamp_odd(self.kh, xs.h), clamp_odd(self.kw, xs.w));
        let mut w = f.param(self.weight);
        if (eh, ew) != (self.kh, self.kw) {
            w = crop_kernel_center(f.graph, w, eh, ew)?;
        }
        let spec = Conv2dSpec::depthwise(xs.c, eh, ew).with_bias(false);
        conv2d(f.graph, x, w, &spec)
    }
}

// ---------------------------------------------------------------------------
// The attention block
// ---------------------------------------------------------------------------

/// Channel attention → channel shuffle → spatial attention, shape-preserving
/// and deliberately non-residual: zeroed parameters zero the output.
pub struct GmeaBlock {
    mlp: ChannelMlp,
    stem: Conv2dLayer,
    strips: Vec<StripConv>,
    out_conv: Conv2dLayer,
    channels: usize,
    /// Run the 5×5 depthwise stem before the strip branches (the default).
    /// Disabled, the strips read the shuffled features directly.
    pub use_stem: bool,
}

impl GmeaBlock {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut impl Rng,
        name: &str,
        channels: usize,
    ) -> Result<Self> {
        if channels == 0 || channels % SHUFFLE_GROUPS != 0 {
            return Err(Error::Config(format!(
                "attention block needs channels divisible by {SHUFFLE_GROUPS}, got {channels}"
            )));
        }
        let reduction = (channels / 4).max(1);
        if channels % reduction != 0 {
            return Err(Error::Config(format!(
                "attention block needs channels divisible by the MLP reduction {reduction}"
            )));
        }
        let mut strips = Vec::with_capacity(2 * STRIP_LENGTHS.len());
        for (i, &len) in STRIP_LENGTHS.iter().enumerate() {
            strips.push(StripConv::new(
                store,
                rng,
                &format!("{name}.strip{}", 2 * i + 1),
                channels,
                1,
                len,
            )?);
            strips.push(StripConv::new(
                store,
                rng,
                &format!("{name}.strip{}", 2 * i + 2),
                channels,
                len,
                1,
            )?);
        }
        Ok(GmeaBlock {
            mlp: ChannelMlp::with_hidden(
                store,
                rng,
                &format!("{name}.mlp"),
                channels,
                channels / reduction,
            )?,
            stem: Conv2dLayer::new(
                store,
                rng,
                &format!("{name}.stem"),
                Conv2dSpec::depthwise(channels, 5, 5).with_bias(false),
            )?,
            strips,
            out_conv: Conv2dLayer::new(
                store,
                rng,
                &format!("{name}.out"),
                Conv2dSpec::pointwise(channels, 1),
            )?,
            channels,
            use_stem: true,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Per-channel gate in (0, 3): the sum of the sigmoided MLP responses to
    /// the average, max, and median descriptors. Shape (N, C, 1, 1).
    pub fn channel_gate<S: Scalar>(&self, f: &mut Fwd<S>, x: VarId) -> Result<VarId> {
        let mut gate = None;
        for kind in [GlobalPoolKind::Avg, GlobalPoolKind::Max, GlobalPoolKind::Median] {
            let pooled = global_pool(f.graph, x, kind)?;
            let scored = self.mlp.forward(f, pooled)?;
            let term = sigmoid(f.graph, scored)?;
            gate = Some(match gate {
                None => term,
                Some(acc) => add(f.graph, acc, term)?,
            });
        }
        Ok(gate.expect("three descriptors"))
    }

    /// The input rescaled per channel by the triple-descriptor gate.
    pub fn channel_attention<S: Scalar>(&self, f: &mut Fwd<S>, x: VarId) -> Result<VarId> {
        let gate = self.channel_gate(f, x)?;
        mul(f.graph, x, gate)
    }

    /// Multi-directional spatial gating: stem → six strip branches summed →
    /// 1×1 projection to a single-channel map → rescale the input by it.
    pub fn spatial_attention<S: Scalar>(&self, f: &mut Fwd<S>, x: VarId) -> Result<VarId> {
        let c = f.graph.value(x).shape().c;
        let s = if self.use_stem {
            self.stem.forward(f, x)?
        } else {
            x
        };
        let mut summed = None;
        for strip in &self.strips {
            let b = strip.forward(f, s)?;
            summed = Some(match summed {
                None => b,
                Some(acc) => add(f.graph, acc, b)?,
            });
        }
        let map = self.out_conv.forward(f, summed.expect("six strips"))?;
        let map = broadcast_channels(f.graph, map, c)?;
        mul(f.graph, x, map)
    }

    pub fn forward<S: Scalar>(&self, f: &mut Fwd<S>, x: VarId) -> Result<VarId> {
        let shape = f.graph.value(x).shape();
        if shape.c != self.channels {
            return Err(Error::Dimension(format!(
                "attention block built for {} channels got {}",
                self.channels, shape.c
            )));
        }
        let weighted = self.channel_attention(f, x)?;
        let perm = shuffle_permutation(self.channels, SHUFFLE_GROUPS)?;
        let shuffled = permute_channels(f.graph, weighted, perm)?;
        self.spatial_attention(f, shuffled)
    }
}
