//! Single-level 2D Haar transform over packed subband tensors.
//!
//! Convention (unnormalized sums): for each 2×2 block with a = top-left,
//! b = top-right, c = bottom-left, d = bottom-right,
//!
//! ```text
//! ll = a + b + c + d          lh = (a + c) − (b + d)
//! hl = (a + b) − (c + d)      hh = (a + d) − (b + c)
//! ```
//!
//! The block matrix M is symmetric with M² = 4I, so synthesis is M/4 and
//! every adjoint is again a (scaled) Haar pass — the backward rules below are
//! exact, not approximations.
//!
//! Packed layout: subbands are channel groups `[ll | lh | hl | hh]`, each C
//! channels wide, giving (N, 4C, H/2, W/2).

use crate::error::{Error, Result};
use crate::graph::{Graph, Op, VarId};
use crate::scalar::Scalar;
use crate::shape::Shape;
use crate::tensor::Tensor;

fn require_even(shape: Shape, context: &str) -> Result<()> {
    if shape.h % 2 != 0 || shape.w % 2 != 0 {
        return Err(Error::Dimension(format!(
            "{context} needs even spatial dims, got {shape}"
        )));
    }
    Ok(())
}

fn require_packed(shape: Shape, context: &str) -> Result<usize> {
    if shape.c % 4 != 0 {
        return Err(Error::Dimension(format!(
            "{context} needs 4·C channels of packed subbands, got {shape}"
        )));
    }
    Ok(shape.c / 4)
}

/// Forward block transform, with every coefficient scaled by `scale`.
pub(crate) fn haar_analyze_kernel<S: Scalar>(x: &Tensor<S>, scale: S) -> Tensor<S> {
    let xs = x.shape();
    let (h2, w2) = (xs.h / 2, xs.w / 2);
    let out_shape = Shape::new(xs.n, 4 * xs.c, h2, w2);
    let mut out = Tensor::zeros(out_shape);
    let dst = out.data_mut();
    for n in 0..xs.n {
        for c in 0..xs.c {
            for i in 0..h2 {
                let top = xs.row(n, c, 2 * i);
                let bot = xs.row(n, c, 2 * i + 1);
                let ll_row = out_shape.row(n, c, i);
                let lh_row = out_shape.row(n, xs.c + c, i);
                let hl_row = out_shape.row(n, 2 * xs.c + c, i);
                let hh_row = out_shape.row(n, 3 * xs.c + c, i);
                for j in 0..w2 {
                    let a = x.data()[top + 2 * j];
                    let b = x.data()[top + 2 * j + 1];
                    let cc = x.data()[bot + 2 * j];
                    let d = x.data()[bot + 2 * j + 1];
                    dst[ll_row + j] = (a + b + cc + d) * scale;
                    dst[lh_row + j] = (a + cc - b - d) * scale;
                    dst[hl_row + j] = (a + b - cc - d) * scale;
                    dst[hh_row + j] = (a + d - b - cc) * scale;
                }
            }
        }
    }
    out
}

/// Inverse block transform (M·coeffs, scaled). Perfect reconstruction uses
/// `scale = 1/4`.
pub(crate) fn haar_synthesize_kernel<S: Scalar>(packed: &Tensor<S>, scale: S) -> Tensor<S> {
    let ps = packed.shape();
    let c_out = ps.c / 4;
    let out_shape = Shape::new(ps.n, c_out, ps.h * 2, ps.w * 2);
    let mut out = Tensor::zeros(out_shape);
    let dst = out.data_mut();
    for n in 0..ps.n {
        for c in 0..c_out {
            for i in 0..ps.h {
                let ll_row = ps.row(n, c, i);
                let lh_row = ps.row(n, c_out + c, i);
                let hl_row = ps.row(n, 2 * c_out + c, i);
                let hh_row = ps.row(n, 3 * c_out + c, i);
                let top = out_shape.row(n, c, 2 * i);
                let bot = out_shape.row(n, c, 2 * i + 1);
                for j in 0..ps.w {
                    let ll = packed.data()[ll_row + j];
                    let lh = packed.data()[lh_row + j];
                    let hl = packed.data()[hl_row + j];
                    let hh = packed.data()[hh_row + j];
                    dst[top + 2 * j] = (ll + lh + hl + hh) * scale;
                    dst[top + 2 * j + 1] = (ll - lh + hl - hh) * scale;
                    dst[bot + 2 * j] = (ll + lh - hl - hh) * scale;
                    dst[bot + 2 * j + 1] = (ll - lh - hl + hh) * scale;
                }
            }
        }
    }
    out
}

/// Mean of the four subband groups: equivalently, the top-left phase of the
/// inverse transform sampled on the half-resolution grid.
pub(crate) fn haar_fuse_kernel<S: Scalar>(packed: &Tensor<S>) -> Tensor<S> {
    let ps = packed.shape();
    let c_out = ps.c / 4;
    let out_shape = Shape::new(ps.n, c_out, ps.h, ps.w);
    let quarter = S::from_f64(0.25);
    let plane = ps.plane_len();
    let mut out = Tensor::zeros(out_shape);
    let dst = out.data_mut();
    for n in 0..ps.n {
        for c in 0..c_out {
            let ll = ps.row(n, c, 0);
            let lh = ps.row(n, c_out + c, 0);
            let hl = ps.row(n, 2 * c_out + c, 0);
            let hh = ps.row(n, 3 * c_out + c, 0);
            let base = out_shape.row(n, c, 0);
            for k in 0..plane {
                dst[base + k] = (packed.data()[ll + k]
                    + packed.data()[lh + k]
                    + packed.data()[hl + k]
                    + packed.data()[hh + k])
                    * quarter;
            }
        }
    }
    out
}

struct HaarAnalyzeOp;

impl<S: Scalar> Op<S> for HaarAnalyzeOp {
    fn name(&self) -> &'static str {
        "haar_analyze"
    }

    fn backward(
        &self,
        _parents: &[Tensor<S>],
        _output: &Tensor<S>,
        grad: &Tensor<S>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<S>>>> {
        // Adjoint of M is M itself: a synthesis pass without the 1/4.
        Ok(vec![
            needs[0].then(|| haar_synthesize_kernel(grad, S::one()))
        ])
    }
}

/// Decompose into packed subbands (N, 4C, H/2, W/2).
pub fn haar_analyze_packed<S: Scalar>(g: &mut Graph<S>, x: VarId) -> Result<VarId> {
    let xv = g.value(x).clone();
    require_even(xv.shape(), "haar_analyze")?;
    let out = haar_analyze_kernel(&xv, S::one());
    g.push_op(out, vec![x], Box::new(HaarAnalyzeOp))
}

struct HaarSynthesizeOp;

impl<S: Scalar> Op<S> for HaarSynthesizeOp {
    fn name(&self) -> &'static str {
        "haar_synthesize"
    }

    fn backward(
        &self,
        _parents: &[Tensor<S>],
        _output: &Tensor<S>,
        grad: &Tensor<S>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<S>>>> {
        // Adjoint of M/4 is an analysis pass scaled by 1/4.
        Ok(vec![needs[0].then(|| haar_analyze_kernel(grad, S::from_f64(0.25)))])
    }
}

/// Reconstruct (N, C, H, W) from packed subbands — exact inverse of
/// `haar_analyze_packed`.
pub fn haar_synthesize_packed<S: Scalar>(g: &mut Graph<S>, packed: VarId) -> Result<VarId> {
    let pv = g.value(packed).clone();
    require_packed(pv.shape(), "haar_synthesize")?;
    let out = haar_synthesize_kernel(&pv, S::from_f64(0.25));
    g.push_op(out, vec![packed], Box::new(HaarSynthesizeOp))
}

struct HaarFuseOp;

impl<S: Scalar> Op<S> for HaarFuseOp {
    fn name(&self) -> &'static str {
        "haar_fuse_downsampled"
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
        let ps = parents[0].shape();
        let c_out = ps.c / 4;
        let quarter = S::from_f64(0.25);
        let plane = ps.plane_len();
        let gshape = grad.shape();
        let mut out = Tensor::zeros(ps);
        {
            let dst = out.data_mut();
            for n in 0..ps.n {
                for c in 0..c_out {
                    let src = gshape.row(n, c, 0);
                    for grp in 0..4 {
                        let base = ps.row(n, grp * c_out + c, 0);
                        for k in 0..plane {
                            dst[base + k] = grad.data()[src + k] * quarter;
                        }
                    }
                }
            }
        }
        Ok(vec![Some(out)])
    }
}

/// Collapse packed subbands to (N, C, H/2, W/2) by averaging the four groups —
/// an inverse-transform-then-decimate fusion that keeps the half resolution.
pub fn haar_fuse_downsampled_packed<S: Scalar>(g: &mut Graph<S>, packed: VarId) -> Result<VarId> {
    let pv = g.value(packed).clone();
    require_packed(pv.shape(), "haar_fuse_downsampled")?;
    let out = haar_fuse_kernel(&pv);
    g.push_op(out, vec![packed], Box::new(HaarFuseOp))
}
