//! Modulated deformable 3×3 convolution (stride 1, same padding).
//!
//! Each of the K = 9 kernel taps samples the input at its regular grid
//! position displaced by a learned fractional offset, reads the value by
//! bilinear interpolation (zero outside the image), and scales it by a
//! per-tap modulation factor:
//!
//! ```text
//! y(p) = Σ_k w_k · m_k(p) · x(p + p_k + Δp_k(p))
//! ```
//!
//! Offsets arrive as 2K channels ordered (Δy_k, Δx_k) per tap, modulation as
//! K channels already squashed to (0, 1). The op is differentiable in the
//! input, the projection weights, the offsets, and the modulation.
//!
//! Internally each sample builds an im2col buffer `col[(ic·K + k), p] =
//! m_k(p) · sample_k(ic, p)` so the projection and its two matmul adjoints
//! run over contiguous rows; the sampling geometry is recomputed in backward
//! rather than stored.

use crate::error::{Error, Result};
use crate::graph::{Graph, Op, VarId};
use crate::scalar::Scalar;
use crate::shape::Shape;
use crate::tensor::Tensor;

/// Kernel taps per output position (3×3).
const K: usize = 9;

/// Resolved sampling geometry for one (tap, position) pair.
#[derive(Clone, Copy)]
struct SamplePoint<S> {
    y0: isize,
    x0: isize,
    fy: S,
    fx: S,
    /// Entirely outside the image: value and all derivatives are zero.
    oob: bool,
}

fn resolve_point<S: Scalar>(py: S, px: S, h: usize, w: usize) -> SamplePoint<S> {
    let pyf = py.as_f64();
    let pxf = px.as_f64();
    if !(pyf > -1.0 && pyf < h as f64 && pxf > -1.0 && pxf < w as f64) {
        return SamplePoint {
            y0: 0,
            x0: 0,
            fy: S::zero(),
            fx: S::zero(),
            oob: true,
        };
    }
    let y0 = pyf.floor() as isize;
    let x0 = pxf.floor() as isize;
    SamplePoint {
        y0,
        x0,
        fy: py - S::from_f64(y0 as f64),
        fx: px - S::from_f64(x0 as f64),
        oob: false,
    }
}

#[inline]
fn plane_at<S: Scalar>(plane: &[S], h: usize, w: usize, y: isize, x: isize) -> S {
    if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
        S::zero()
    } else {
        plane[y as usize * w + x as usize]
    }
}

#[inline]
fn sample_value<S: Scalar>(plane: &[S], h: usize, w: usize, pt: SamplePoint<S>) -> S {
    if pt.oob {
        return S::zero();
    }
    let one = S::one();
    let a = plane_at(plane, h, w, pt.y0, pt.x0);
    let b = plane_at(plane, h, w, pt.y0, pt.x0 + 1);
    let c = plane_at(plane, h, w, pt.y0 + 1, pt.x0);
    let d = plane_at(plane, h, w, pt.y0 + 1, pt.x0 + 1);
    let top = a * (one - pt.fx) + b * pt.fx;
    let bot = c * (one - pt.fx) + d * pt.fx;
    top * (one - pt.fy) + bot * pt.fy
}

/// (value, ∂value/∂py, ∂value/∂px) at one sampling point.
#[inline]
fn sample_with_derivs<S: Scalar>(plane: &[S], h: usize, w: usize, pt: SamplePoint<S>) -> (S, S, S) {
    if pt.oob {
        return (S::zero(), S::zero(), S::zero());
    }
    let one = S::one();
    let a = plane_at(plane, h, w, pt.y0, pt.x0);
    let b = plane_at(plane, h, w, pt.y0, pt.x0 + 1);
    let c = plane_at(plane, h, w, pt.y0 + 1, pt.x0);
    let d = plane_at(plane, h, w, pt.y0 + 1, pt.x0 + 1);
    let top = a * (one - pt.fx) + b * pt.fx;
    let bot = c * (one - pt.fx) + d * pt.fx;
    let value = top * (one - pt.fy) + bot * pt.fy;
    let dpy = bot - top;
    let dpx = (b - a) * (one - pt.fy) + (d - c) * pt.fy;
    (value, dpy, dpx)
}

/// Geometry for every (tap, position) of one sample: index `k·HW + p`.
fn resolve_sample_points<S: Scalar>(
    offset: &Tensor<S>,
    n: usize,
    h: usize,
    w: usize,
) -> Vec<SamplePoint<S>> {
    let os = offset.shape();
    let hw = h * w;
    let mut pts = Vec::with_capacity(K * hw);
    for k in 0..K {
        let base_dy = (k / 3) as f64 - 1.0;
        let base_dx = (k % 3) as f64 - 1.0;
        let dy_plane = os.row(n, 2 * k, 0);
        let dx_plane = os.row(n, 2 * k + 1, 0);
        for oy in 0..h {
            for ox in 0..w {
                let p = oy * w + ox;
                let py = S::from_f64(oy as f64 + base_dy) + offset.data()[dy_plane + p];
                let px = S::from_f64(ox as f64 + base_dx) + offset.data()[dx_plane + p];
                pts.push(resolve_point(py, px, h, w));
            }
        }
    }
    pts
}

/// col[(ic·K + k), p] = m_k(p) · sample_k(ic, p) for one batch element.
fn build_columns<S: Scalar>(
    x: &Tensor<S>,
    modulation: &Tensor<S>,
    pts: &[SamplePoint<S>],
    n: usize,
    col: &mut [S],
) {
    let xs = x.shape();
    let ms = modulation.shape();
    let (h, w) = (xs.h, xs.w);
    let hw = h * w;
    for ic in 0..xs.c {
        let plane = &x.data()[xs.row(n, ic, 0)..xs.row(n, ic, 0) + hw];
        for k in 0..K {
            let mrow = &modulation.data()[ms.row(n, k, 0)..ms.row(n, k, 0) + hw];
            let row = &mut col[(ic * K + k) * hw..(ic * K + k + 1) * hw];
            let kpts = &pts[k * hw..(k + 1) * hw];
            for p in 0..hw {
                row[p] = sample_value(plane, h, w, kpts[p]) * mrow[p];
            }
        }
    }
}

pub(crate) fn deform_conv2d_forward<S: Scalar>(
    x: &Tensor<S>,
    weight: &Tensor<S>,
    offset: &Tensor<S>,
    modulation: &Tensor<S>,
) -> Tensor<S> {
    let xs = x.shape();
    let ws = weight.shape();
    let (h, w) = (xs.h, xs.w);
    let hw = h * w;
    let cols = xs.c * K;
    let out_shape = Shape::new(xs.n, ws.n, h, w);
    let mut out = Tensor::zeros(out_shape);
    let dst = out.data_mut();
    let mut col = vec![S::zero(); cols * hw];
    for n in 0..xs.n {
        let pts = resolve_sample_points(offset, n, h, w);
        build_columns(x, modulation, &pts, n, &mut col);
        for oc in 0..ws.n {
            let orow = &mut dst[out_shape.row(n, oc, 0)..out_shape.row(n, oc, 0) + hw];
            for j in 0..cols {
                let wj = weight.data()[oc * cols + j];
                if wj == S::zero() {
                    continue;
                }
                let crow = &col[j * hw..(j + 1) * hw];
                for p in 0..hw {
                    orow[p] = orow[p] + wj * crow[p];
                }
            }
        }
    }
    out
}

struct DeformConv2dOp;

impl<S: Scalar> Op<S> for DeformConv2dOp {
    fn name(&self) -> &'static str {
        "deform_conv2d"
    }

    fn backward(
        &self,
        parents: &[Tensor<S>],
        _output: &Tensor<S>,
        grad: &Tensor<S>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<S>>>> {
        let (x, weight, offset, modulation) = (&parents[0], &parents[1], &parents[2], &parents[3]);
        let xs = x.shape();
        let ws = weight.shape();
        let gs = grad.shape();
        let (h, w) = (xs.h, xs.w);
        let hw = h * w;
        let cols = xs.c * K;
        let one = S::one();

        let need_x = needs[0];
        let need_w = needs[1];
        let need_off = needs[2];
        let need_mod = needs[3];

        let mut gx = need_x.then(|| Tensor::zeros(xs));
        let mut gw = need_w.then(|| Tensor::zeros(ws));
        let mut goff = need_off.then(|| Tensor::zeros(offset.shape()));
        let mut gmod = need_mod.then(|| Tensor::zeros(modulation.shape()));

        let mut col = vec![S::zero(); cols * hw];
        let mut gcol = vec![S::zero(); cols * hw];
        for n in 0..xs.n {
            let pts = resolve_sample_points(offset, n, h, w);

            if need_w {
                build_columns(x, modulation, &pts, n, &mut col);
                let gwd = gw.as_mut().unwrap().data_mut();
                for oc in 0..ws.n {
                    let grow = &grad.data()[gs.row(n, oc, 0)..gs.row(n, oc, 0) + hw];
                    for j in 0..cols {
                        let crow = &col[j * hw..(j + 1) * hw];
                        let mut acc = S::zero();
                        for p in 0..hw {
                            acc = acc + grow[p] * crow[p];
                        }
                        gwd[oc * cols + j] = gwd[oc * cols + j] + acc;
                    }
                }
            }

            if need_x || need_off || need_mod {
                // gcol = Wᵀ · grad: per-column upstream gradient.
                gcol.iter_mut().for_each(|v| *v = S::zero());
                for oc in 0..ws.n {
                    let grow = &grad.data()[gs.row(n, oc, 0)..gs.row(n, oc, 0) + hw];
                    for j in 0..cols {
                        let wj = weight.data()[oc * cols + j];
                        if wj == S::zero() {
                            continue;
                        }
                        let grow_j = &mut gcol[j * hw..(j + 1) * hw];
                        for p in 0..hw {
                            grow_j[p] = grow_j[p] + wj * grow[p];
                        }
                    }
                }

                let ms = modulation.shape();
                for k in 0..K {
                    let kpts = &pts[k * hw..(k + 1) * hw];
                    let mrow = ms.row(n, k, 0);
                    for p in 0..hw {
                        let pt = kpts[p];
                        if pt.oob {
                            continue;
                        }
                        let m = modulation.data()[mrow + p];
                        let mut acc_m = S::zero();
                        let mut acc_dy = S::zero();
                        let mut acc_dx = S::zero();
                        for ic in 0..xs.c {
                            let gc = gcol[(ic * K + k) * hw + p];
                            if gc == S::zero() {
                                continue;
                            }
                            let pbase = xs.row(n, ic, 0);
                            let plane = &x.data()[pbase..pbase + hw];
                            if need_off || need_mod {
                                let (s, dpy, dpx) = sample_with_derivs(plane, h, w, pt);
                                acc_m = acc_m + s * gc;
                                acc_dy = acc_dy + dpy * gc;
                                acc_dx = acc_dx + dpx * gc;
                            }
                            if need_x {
                                let coeff = m * gc;
                                let gxd = gx.as_mut().unwrap().data_mut();
                                let gplane = &mut gxd[pbase..pbase + hw];
                                let (fy, fx) = (pt.fy, pt.fx);
                                let mut tap = |y: isize, xq: isize, wt: S| {
                                    if y >= 0 && xq >= 0 && y < h as isize && xq < w as isize {
                                        let idx = y as usize * w + xq as usize;
                                        gplane[idx] = gplane[idx] + coeff * wt;
                                    }
                                };
                                tap(pt.y0, pt.x0, (one - fy) * (one - fx));
                                tap(pt.y0, pt.x0 + 1, (one - fy) * fx);
                                tap(pt.y0 + 1, pt.x0, fy * (one - fx));
                                tap(pt.y0 + 1, pt.x0 + 1, fy * fx);
                            }
                        }
                        if need_mod {
                            let gmd = gmod.as_mut().unwrap().data_mut();
                            gmd[mrow + p] = gmd[mrow + p] + acc_m;
                        }
                        if need_off {
                            let os = offset.shape();
                            let god = goff.as_mut().unwrap().data_mut();
                            let dy_idx = os.row(n, 2 * k, 0) + p;
                            let dx_idx = os.row(n, 2 * k + 1, 0) + p;
                            god[dy_idx] = god[dy_idx] + m * acc_dy;
                            god[dx_idx] = god[dx_idx] + m * acc_dx;
                        }
                    }
                }
            }
        }
        Ok(vec![
            gx,
            gw,
            goff,
            gmod,
        ])
    }
}

/// Modulated deformable 3×3 convolution, stride 1, same padding.
///
/// Shapes: `x` (N, C_in, H, W), `weight` (C_out, C_in, 3, 3), `offset`
/// (N, 18, H, W) as (Δy, Δx) pairs per tap, `modulation` (N, 9, H, W) with
/// values in (0, 1). Output is (N, C_out, H, W).
pub fn deform_conv2d<S: Scalar>(
    g: &mut Graph<S>,
    x: VarId,
    weight: VarId,
    offset: VarId,
    modulation: VarId,
) -> Result<VarId> {
    let xs = g.value(x).shape();
    let ws = g.value(weight).shape();
    let os = g.value(offset).shape();
    let ms = g.value(modulation).shape();
    if ws.h != 3 || ws.w != 3 || ws.c != xs.c {
        return Err(Error::shape("deform_conv2d weight", Shape::new(ws.n, xs.c, 3, 3), ws));
    }
    if os != Shape::new(xs.n, 2 * K, xs.h, xs.w) {
        return Err(Error::shape(
            "deform_conv2d offset",
            Shape::new(xs.n, 2 * K, xs.h, xs.w),
            os,
        ));
    }
    if ms != Shape::new(xs.n, K, xs.h, xs.w) {
        return Err(Error::shape(
            "deform_conv2d modulation",
            Shape::new(xs.n, K, xs.h, xs.w),
            ms,
        ));
    }
    let out = deform_conv2d_forward(g.value(x), g.value(weight), g.value(offset), g.value(modulation));
    g.push_op(out, vec![x, weight, offset, modulation], Box::new(DeformConv2dOp))
}
