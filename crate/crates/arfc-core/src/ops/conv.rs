//! 2D convolution (cross-correlation, zero padding) with stride, dilation,
//! and channel groups.
//!
//! The forward kernel and both backward kernels are written as gathers: each
//! parallel slab owns a disjoint slice of the output and reads shared inputs,
//! with a fixed inner loop order. Results are therefore identical for any
//! worker count.

use crate::error::{Error, Result};
use crate::graph::{Graph, Op, VarId};
use crate::runtime::par_chunks;
use crate::scalar::Scalar;
use crate::shape::Shape;
use crate::tensor::Tensor;

/// Per-side zero padding in pixels.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Default)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub fn symmetric(vertical: usize, horizontal: usize) -> Self {
        Padding {
            top: vertical,
            bottom: vertical,
            left: horizontal,
            right: horizontal,
        }
    }
}

/// Static description of a convolution layer.
#[derive(Clone, Debug)]
pub struct Conv2dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
    pub padding: Padding,
    pub bias: bool,
}

impl Conv2dSpec {
    /// Odd-kernel convolution that preserves spatial size at stride 1
    /// ("same" zero padding, scaled by dilation).
    pub fn same(in_channels: usize, out_channels: usize, kh: usize, kw: usize, dilation: usize) -> Self {
        Conv2dSpec {
            in_channels,
            out_channels,
            kernel_h: kh,
            kernel_w: kw,
            stride: 1,
            dilation,
            groups: 1,
            padding: Padding::symmetric(dilation * (kh - 1) / 2, dilation * (kw - 1) / 2),
            bias: true,
        }
    }

    /// Pointwise 1×1 convolution.
    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Conv2dSpec::same(in_channels, out_channels, 1, 1, 1)
    }

    /// Depthwise "same" convolution (groups = channels).
    pub fn depthwise(channels: usize, kh: usize, kw: usize) -> Self {
        let mut spec = Conv2dSpec::same(channels, channels, kh, kw, 1);
        spec.groups = channels;
        spec
    }

    pub fn with_bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0
            || self.out_channels == 0
            || self.kernel_h == 0
            || self.kernel_w == 0
            || self.stride == 0
            || self.dilation == 0
            || self.groups == 0
        {
            return Err(Error::Config(format!("degenerate convolution spec {self:?}")));
        }
        if self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return Err(Error::Config(format!(
                "channels ({} in, {} out) not divisible by {} groups",
                self.in_channels, self.out_channels, self.groups
            )));
        }
        Ok(())
    }

    /// Expected weight tensor shape: (out_channels, in_channels/groups, kh, kw).
    pub fn weight_shape(&self) -> Shape {
        Shape::new(
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel_h,
            self.kernel_w,
        )
    }

    /// Output spatial size for an input of (h, w).
    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let span_h = self.dilation * (self.kernel_h - 1) + 1;
        let span_w = self.dilation * (self.kernel_w - 1) + 1;
        let full_h = h + self.padding.top + self.padding.bottom;
        let full_w = w + self.padding.left + self.padding.right;
        if full_h < span_h || full_w < span_w {
            return Err(Error::Dimension(format!(
                "convolution span {span_h}x{span_w} exceeds padded input {full_h}x{full_w}"
            )));
        }
        Ok((
            (full_h - span_h) / self.stride + 1,
            (full_w - span_w) / self.stride + 1,
        ))
    }
}

pub(crate) fn conv2d_forward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    spec: &Conv2dSpec,
) -> Result<Tensor<S>> {
    spec.validate()?;
    let xs = x.shape();
    if xs.c != spec.in_channels {
        return Err(Error::shape("conv2d input channels", xs.c, spec.in_channels));
    }
    w.require_shape(spec.weight_shape(), "conv2d weights")?;
    let (oh, ow) = spec.out_hw(xs.h, xs.w)?;
    let out_shape = Shape::new(xs.n, spec.out_channels, oh, ow);

    let icpg = spec.in_channels / spec.groups;
    let ocpg = spec.out_channels / spec.groups;
    let (sd, dd) = (spec.stride, spec.dilation);
    let (pt, pl) = (spec.padding.top as isize, spec.padding.left as isize);
    let xd = x.data();
    let wd = w.data();

    let mut out = vec![S::zero(); out_shape.len()];
    par_chunks(&mut out, xs.n * spec.out_channels, |slab_idx, slab| {
        let n = slab_idx / spec.out_channels;
        let oc = slab_idx % spec.out_channels;
        let grp = oc / ocpg;
        for oh_i in 0..oh {
            let orow = &mut slab[oh_i * ow..(oh_i + 1) * ow];
            for ic_local in 0..icpg {
                let ic = grp * icpg + ic_local;
                for kh in 0..spec.kernel_h {
                    let ih = (oh_i * sd + kh * dd) as isize - pt;
                    if ih < 0 || ih >= xs.h as isize {
                        continue;
                    }
                    let xrow_base = xs.row(n, ic, ih as usize);
                    let xrow = &xd[xrow_base..xrow_base + xs.w];
                    let wbase = spec.weight_shape().row(oc, ic_local, kh);
                    for kw in 0..spec.kernel_w {
                        let wv = wd[wbase + kw];
                        let off = (kw * dd) as isize - pl;
                        // Valid output columns: 0 <= ow*stride + off < W.
                        let lo = if off < 0 {
                            ((-off) as usize).div_ceil(sd)
                        } else {
                            0
                        };
                        let hi_excl = if (xs.w as isize) > off {
                            (((xs.w as isize - 1 - off) as usize) / sd + 1).min(ow)
                        } else {
                            0
                        };
                        // Padding wider than the input can empty the range.
                        if lo >= hi_excl {
                            continue;
                        }
                        if sd == 1 {
                            let src = &xrow[(lo as isize + off) as usize
                                ..(hi_excl as isize + off) as usize];
                            for (o, &xv) in orow[lo..hi_excl].iter_mut().zip(src) {
                                *o = *o + wv * xv;
                            }
                        } else {
                            for ow_i in lo..hi_excl {
                                let iw = (ow_i * sd) as isize + off;
                                orow[ow_i] = orow[ow_i] + wv * xrow[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::new(out_shape, out)
}

/// Gradient w.r.t. the input: gather formulation, parallel over (n, ic).
fn conv2d_backward_input<S: Scalar>(
    grad_out: &Tensor<S>,
    w: &Tensor<S>,
    spec: &Conv2dSpec,
    input_shape: Shape,
) -> Tensor<S> {
    let gs = grad_out.shape();
    let icpg = spec.in_channels / spec.groups;
    let ocpg = spec.out_channels / spec.groups;
    let (sd, dd) = (spec.stride, spec.dilation);
    let (pt, pl) = (spec.padding.top as isize, spec.padding.left as isize);
    let gd = grad_out.data();
    let wd = w.data();
    let wshape = spec.weight_shape();

    let mut gx = vec![S::zero(); input_shape.len()];
    par_chunks(&mut gx, input_shape.n * input_shape.c, |slab_idx, slab| {
        let n = slab_idx / input_shape.c;
        let ic = slab_idx % input_shape.c;
        let grp = ic / icpg;
        let ic_local = ic % icpg;
        for ih in 0..input_shape.h {
            let xrow = &mut slab[ih * input_shape.w..(ih + 1) * input_shape.w];
            for kh in 0..spec.kernel_h {
                let t = ih as isize + pt - (kh * dd) as isize;
                if t < 0 || t % sd as isize != 0 {
                    continue;
                }
                let oh_i = (t / sd as isize) as usize;
                if oh_i >= gs.h {
                    continue;
                }
                for oc_local in 0..ocpg {
                    let oc = grp * ocpg + oc_local;
                    let grow_base = gs.row(n, oc, oh_i);
                    let grow = &gd[grow_base..grow_base + gs.w];
                    let wbase = wshape.row(oc, ic_local, kh);
                    for kw in 0..spec.kernel_w {
                        let wv = wd[wbase + kw];
                        let u = pl - (kw * dd) as isize;
                        if sd == 1 {
                            // iw = ow - u  ⇒  gx[iw] += wv * gy[ow]
                            let ow_lo = u.max(0) as usize;
                            let ow_hi =
                                ((input_shape.w as isize - 1 + u).min(gs.w as isize - 1)) as isize;
                            if ow_hi < ow_lo as isize {
                                continue;
                            }
                            let ow_hi = ow_hi as usize;
                            let dst = &mut xrow[(ow_lo as isize - u) as usize
                                ..(ow_hi as isize - u + 1) as usize];
                            for (d, &gv) in dst.iter_mut().zip(&grow[ow_lo..=ow_hi]) {
                                *d = *d + wv * gv;
                            }
                        } else {
                            for iw in 0..input_shape.w {
                                let t2 = iw as isize + u;
                                if t2 < 0 || t2 % sd as isize != 0 {
                                    continue;
                                }
                                let ow_i = (t2 / sd as isize) as usize;
                                if ow_i >= gs.w {
                                    continue;
                                }
                                xrow[iw] = xrow[iw] + wv * grow[ow_i];
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::new(input_shape, gx).expect("sized buffer")
}

/// Gradient w.r.t. the weights: parallel over output channels, serial over
/// batch/rows inside each slab for determinism.
fn conv2d_backward_weight<S: Scalar>(
    grad_out: &Tensor<S>,
    x: &Tensor<S>,
    spec: &Conv2dSpec,
) -> Tensor<S> {
    let gs = grad_out.shape();
    let xs = x.shape();
    let icpg = spec.in_channels / spec.groups;
    let ocpg = spec.out_channels / spec.groups;
    let (sd, dd) = (spec.stride, spec.dilation);
    let (pt, pl) = (spec.padding.top as isize, spec.padding.left as isize);
    let gd = grad_out.data();
    let xd = x.data();
    let wshape = spec.weight_shape();

    let mut gw = vec![S::zero(); wshape.len()];
    par_chunks(&mut gw, spec.out_channels, |oc, slab| {
        let grp = oc / ocpg;
        for n in 0..gs.n {
            for oh_i in 0..gs.h {
                let grow_base = gs.row(n, oc, oh_i);
                let grow = &gd[grow_base..grow_base + gs.w];
                for ic_local in 0..icpg {
                    let ic = grp * icpg + ic_local;
                    for kh in 0..spec.kernel_h {
                        let ih = (oh_i * sd + kh * dd) as isize - pt;
                        if ih < 0 || ih >= xs.h as isize {
                            continue;
                        }
                        let xrow_base = xs.row(n, ic, ih as usize);
                        let xrow = &xd[xrow_base..xrow_base + xs.w];
                        for kw in 0..spec.kernel_w {
                            let off = (kw * dd) as isize - pl;
                            let lo = if off < 0 {
                                ((-off) as usize).div_ceil(sd)
                            } else {
                                0
                            };
                            let hi_excl = if (xs.w as isize) > off {
                                (((xs.w as isize - 1 - off) as usize) / sd + 1).min(gs.w)
                            } else {
                                0
                            };
                            // Padding wider than the input can empty the range.
                            if lo >= hi_excl {
                                continue;
                            }
                            let mut acc = S::zero();
                            if sd == 1 {
                                let src = &xrow[(lo as isize + off) as usize
                                    ..(hi_excl as isize + off) as usize];
                                for (&gv, &xv) in grow[lo..hi_excl].iter().zip(src) {
                                    acc = acc + gv * xv;
                                }
                            } else {
                                for ow_i in lo..hi_excl {
                                    let iw = (ow_i * sd) as isize + off;
                                    acc = acc + grow[ow_i] * xrow[iw as usize];
                                }
                            }
                            let slot = (ic_local * spec.kernel_h + kh) * spec.kernel_w + kw;
                            slab[slot] = slab[slot] + acc;
                        }
                    }
                }
            }
        }
    });
    Tensor::new(wshape, gw).expect("sized buffer")
}

struct Conv2dOp {
    spec: Conv2dSpec,
}

impl<S: Scalar> Op<S> for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(
        &self,
        parents: &[Tensor<S>],
        _output: &Tensor<S>,
        grad: &Tensor<S>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<S>>>> {
        let (x, w) = (&parents[0], &parents[1]);
        let gx = needs[0]
            .then(|| conv2d_backward_input(grad, w, &self.spec, x.shape()));
        let gw = needs[1].then(|| conv2d_backward_weight(grad, x, &self.spec));
        Ok(vec![gx, gw])
    }
}

/// Record a convolution node. Bias, when a layer has one, is a separate
/// `add_bias` node.
pub fn conv2d<S: Scalar>(
    g: &mut Graph<S>,
    x: VarId,
    weights: VarId,
    spec: &Conv2dSpec,
) -> Result<VarId> {
    let out = conv2d_forward(g.value(x), g.value(weights), spec)?;
    g.push_op(out, vec![x, weights], Box::new(Conv2dOp { spec: spec.clone() }))
}
