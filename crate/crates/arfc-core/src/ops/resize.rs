//! Bilinear ×2 upsampling (align-corners = false).
//!
//! Source coordinate for output index `o` is `(o + 0.5)/2 − 0.5`, clamped to
//! 0 at the low edge; the high edge never overflows because the last source
//! index floors to `len − 1`. A 1-pixel axis therefore replicates.

use crate::error::{Error, Result};
use crate::graph::{Graph, Op, VarId};
use crate::scalar::Scalar;
use crate::shape::Shape;
use crate::tensor::Tensor;

/// Per-output-index sampling table for one axis: low index, high index, and
/// the weight of the low index (high gets `1 − w`).
fn axis_table<S: Scalar>(in_len: usize) -> Vec<(usize, usize, S)> {
    (0..2 * in_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * 0.5 - 0.5).max(0.0);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(in_len - 1);
            let frac = src - lo as f64;
            (lo, hi, S::from_f64(1.0 - frac))
        })
        .collect()
}

fn upsample_kernel<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let xs = x.shape();
    let out_shape = Shape::new(xs.n, xs.c, 2 * xs.h, 2 * xs.w);
    let ys = axis_table::<S>(xs.h);
    let xt = axis_table::<S>(xs.w);
    let one = S::one();
    let mut out = Tensor::zeros(out_shape);
    let dst = out.data_mut();
    for n in 0..xs.n {
        for c in 0..xs.c {
            for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
                let top = xs.row(n, c, y0);
                let bot = xs.row(n, c, y1);
                let orow = out_shape.row(n, c, oy);
                for (ox, &(x0, x1, wx)) in xt.iter().enumerate() {
                    let a = x.data()[top + x0];
                    let b = x.data()[top + x1];
                    let cc = x.data()[bot + x0];
                    let d = x.data()[bot + x1];
                    let top_mix = a * wx + b * (one - wx);
                    let bot_mix = cc * wx + d * (one - wx);
                    dst[orow + ox] = top_mix * wy + bot_mix * (one - wy);
                }
            }
        }
    }
    out
}

struct BilinearUpsampleOp;

impl<S: Scalar> Op<S> for BilinearUpsampleOp {
    fn name(&self) -> &'static str {
        "bilinear_upsample_x2"
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
        let xs = parents[0].shape();
        let gs = grad.shape();
        let ys = axis_table::<S>(xs.h);
        let xt = axis_table::<S>(xs.w);
        let one = S::one();
        let mut out = Tensor::zeros(xs);
        {
            let dst = out.data_mut();
            for n in 0..xs.n {
                for c in 0..xs.c {
                    for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
                        let top = xs.row(n, c, y0);
                        let bot = xs.row(n, c, y1);
                        let grow = gs.row(n, c, oy);
                        for (ox, &(x0, x1, wx)) in xt.iter().enumerate() {
                            let g = grad.data()[grow + ox];
                            dst[top + x0] = dst[top + x0] + g * wy * wx;
                            dst[top + x1] = dst[top + x1] + g * wy * (one - wx);
                            dst[bot + x0] = dst[bot + x0] + g * (one - wy) * wx;
                            dst[bot + x1] = dst[bot + x1] + g * (one - wy) * (one - wx);
                        }
                    }
                }
            }
        }
        Ok(vec![Some(out)])
    }
}

/// Double both spatial dimensions by bilinear interpolation.
pub fn bilinear_upsample_x2<S: Scalar>(g: &mut Graph<S>, x: VarId) -> Result<VarId> {
    let xv = g.value(x).clone();
    if xv.shape().h == 0 || xv.shape().w == 0 {
        return Err(Error::Dimension(format!(
            "cannot upsample empty spatial dims {}",
            xv.shape()
        )));
    }
    let out = upsample_kernel(&xv);
    g.push_op(out, vec![x], Box::new(BilinearUpsampleOp))
}
