//! Spatial 2×2 pooling and global pooling (avg / max / median).

use crate::error::Result;
use crate::graph::{Graph, Op, VarId};
use crate::scalar::Scalar;
use crate::shape::Shape;
use crate::tensor::Tensor;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum GlobalPoolKind {
    Avg,
    Max,
    Median,
}

// ---------------------------------------------------------------------------
// pool2d: fixed 2×2 window, stride 2. Odd inputs replicate the last row or
// column, implemented by clamping window coordinates; ceil-halved output.

fn pooled_hw(h: usize, w: usize) -> (usize, usize) {
    (h.div_ceil(2), w.div_ceil(2))
}

/// The four window cells for output position (oh, ow), clamped to the input —
/// clamping (not skipping) implements replicate padding for odd sizes.
#[inline]
fn window(oh: usize, ow: usize, h: usize, w: usize) -> [(usize, usize); 4] {
    let r0 = 2 * oh;
    let r1 = (2 * oh + 1).min(h - 1);
    let c0 = 2 * ow;
    let c1 = (2 * ow + 1).min(w - 1);
    [(r0, c0), (r0, c1), (r1, c0), (r1, c1)]
}

struct Pool2dOp {
    kind: PoolKind,
}

impl<S: Scalar> Op<S> for Pool2dOp {
    fn name(&self) -> &'static str {
        "pool2d"
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
        let x = &parents[0];
        let xs = x.shape();
        let gs = grad.shape();
        let quarter = S::from_f64(0.25);
        let mut out = Tensor::zeros(xs);
        {
            let dst = out.data_mut();
            for n in 0..xs.n {
                for c in 0..xs.c {
                    for oh in 0..gs.h {
                        for ow in 0..gs.w {
                            let gv = grad.get(n, c, oh, ow);
                            let cells = window(oh, ow, xs.h, xs.w);
                            match self.kind {
                                PoolKind::Avg => {
                                    // Clamped duplicates receive the share twice,
                                    // mirroring their double weight in the forward mean.
                                    for (r, cc) in cells {
                                        let i = xs.at(n, c, r, cc);
                                        dst[i] = dst[i] + gv * quarter;
                                    }
                                }
                                PoolKind::Max => {
                                    // Route to the first maximum in scan order.
                                    let mut best = cells[0];
                                    let mut best_v = x.get(n, c, cells[0].0, cells[0].1);
                                    for &(r, cc) in &cells[1..] {
                                        let v = x.get(n, c, r, cc);
                                        if v > best_v {
                                            best_v = v;
                                            best = (r, cc);
                                        }
                                    }
                                    let i = xs.at(n, c, best.0, best.1);
                                    dst[i] = dst[i] + gv;
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(vec![Some(out)])
    }
}

/// 2×2 stride-2 pooling; odd spatial sizes replicate their last row/column so
/// the output is always ceil(H/2) × ceil(W/2).
pub fn pool2d<S: Scalar>(g: &mut Graph<S>, x: VarId, kind: PoolKind) -> Result<VarId> {
    let xv = g.value(x).clone();
    let xs = xv.shape();
    xs.require_positive("pool2d")?;
    let (oh, ow) = pooled_hw(xs.h, xs.w);
    let out_shape = Shape::new(xs.n, xs.c, oh, ow);
    let quarter = S::from_f64(0.25);
    let mut out = Tensor::zeros(out_shape);
    {
        let dst = out.data_mut();
        let mut i = 0usize;
        for n in 0..xs.n {
            for c in 0..xs.c {
                for oh_i in 0..oh {
                    for ow_i in 0..ow {
                        let cells = window(oh_i, ow_i, xs.h, xs.w);
                        dst[i] = match kind {
                            PoolKind::Max => {
                                let mut m = xv.get(n, c, cells[0].0, cells[0].1);
                                for &(r, cc) in &cells[1..] {
                                    m = m.max(xv.get(n, c, r, cc));
                                }
                                m
                            }
                            PoolKind::Avg => {
                                let mut s = S::zero();
                                for (r, cc) in cells {
                                    s = s + xv.get(n, c, r, cc);
                                }
                                s * quarter
                            }
                        };
                        i += 1;
                    }
                }
            }
        }
    }
    g.push_op(out, vec![x], Box::new(Pool2dOp { kind }))
}

// ---------------------------------------------------------------------------
// global_pool: one statistic per channel plane.

struct GlobalPoolOp {
    kind: GlobalPoolKind,
}

/// Indices of the order statistics the median touches: one index for odd
/// plane sizes, the two middle ones for even. Ties broken by flat index so
/// the routing is deterministic.
fn median_positions<S: Scalar>(plane: &[S]) -> (usize, Option<usize>) {
    let mut idx: Vec<usize> = (0..plane.len()).collect();
    idx.sort_by(|&a, &b| {
        plane[a]
            .partial_cmp(&plane[b])
            .expect("finite values")
            .then(a.cmp(&b))
    });
    let m = plane.len();
    if m % 2 == 1 {
        (idx[m / 2], None)
    } else {
        (idx[m / 2 - 1], Some(idx[m / 2]))
    }
}

impl<S: Scalar> Op<S> for GlobalPoolOp {
    fn name(&self) -> &'static str {
        "global_pool"
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
        let x = &parents[0];
        let xs = x.shape();
        let plane = xs.plane_len();
        let mut out = Tensor::zeros(xs);
        {
            let dst = out.data_mut();
            for n in 0..xs.n {
                for c in 0..xs.c {
                    let gv = grad.get(n, c, 0, 0);
                    let base = xs.row(n, c, 0);
                    let xplane = &x.data()[base..base + plane];
                    match self.kind {
                        GlobalPoolKind::Avg => {
                            let share = gv / S::from_f64(plane as f64);
                            for d in &mut dst[base..base + plane] {
                                *d = *d + share;
                            }
                        }
                        GlobalPoolKind::Max => {
                            let mut best = 0usize;
                            for (i, &v) in xplane.iter().enumerate() {
                                if v > xplane[best] {
                                    best = i;
                                }
                            }
                            dst[base + best] = dst[base + best] + gv;
                        }
                        GlobalPoolKind::Median => {
                            let (a, b) = median_positions(xplane);
                            match b {
                                None => dst[base + a] = dst[base + a] + gv,
                                Some(b) => {
                                    let half = gv * S::from_f64(0.5);
                                    dst[base + a] = dst[base + a] + half;
                                    dst[base + b] = dst[base + b] + half;
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(vec![Some(out)])
    }
}

/// Reduce each (H, W) plane to one value: mean, max, or median (even-length
/// planes use the mean of the two middle order statistics).
pub fn global_pool<S: Scalar>(g: &mut Graph<S>, x: VarId, kind: GlobalPoolKind) -> Result<VarId> {
    let xv = g.value(x).clone();
    let xs = xv.shape();
    xs.require_positive("global_pool")?;
    let plane = xs.plane_len();
    let out_shape = Shape::new(xs.n, xs.c, 1, 1);
    let mut out = Tensor::zeros(out_shape);
    {
        let dst = out.data_mut();
        for n in 0..xs.n {
            for c in 0..xs.c {
                let base = xs.row(n, c, 0);
                let xplane = &xv.data()[base..base + plane];
                dst[n * xs.c + c] = match kind {
                    GlobalPoolKind::Avg => {
                        let mut s = S::zero();
                        for &v in xplane {
                            s = s + v;
                        }
                        s / S::from_f64(plane as f64)
                    }
                    GlobalPoolKind::Max => {
                        let mut m = xplane[0];
                        for &v in &xplane[1..] {
                            m = m.max(v);
                        }
                        m
                    }
                    GlobalPoolKind::Median => {
                        let (a, b) = median_positions(xplane);
                        match b {
                            None => xplane[a],
                            Some(b) => (xplane[a] + xplane[b]) * S::from_f64(0.5),
                        }
                    }
                };
            }
        }
    }
    g.push_op(out, vec![x], Box::new(GlobalPoolOp { kind }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::ops::{mul, sum_all};
    use crate::testutil::{rng_tensor, seeded_rng};

    #[test]
    fn two_by_two_block_examples() {
        let x = Tensor::new(Shape::new(1, 1, 2, 2), vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x);
        let mx = pool2d(&mut g, xv, PoolKind::Max).unwrap();
        let av = pool2d(&mut g, xv, PoolKind::Avg).unwrap();
        assert_eq!(g.value(mx).data(), &[4.0]);
        assert_eq!(g.value(av).data(), &[2.5]);
    }

    #[test]
    fn matches_window_scan_oracle() {
        let mut rng = seeded_rng(5);
        let x = rng_tensor(&mut rng, Shape::new(1, 1, 6, 6));
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let mx = pool2d(&mut g, xv, PoolKind::Max).unwrap();
        for oh in 0..3 {
            for ow in 0..3 {
                let mut m = f64::NEG_INFINITY;
                for r in 0..2 {
                    for c in 0..2 {
                        m = m.max(x.get(0, 0, 2 * oh + r, 2 * ow + c));
                    }
                }
                assert_eq!(g.value(mx).get(0, 0, oh, ow), m);
            }
        }
    }

    #[test]
    fn odd_input_replicates_edge() {
        // 3×3 input: bottom-right window sees only the corner value 4×.
        let x = Tensor::new(
            Shape::new(1, 1, 3, 3),
            vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
        )
        .unwrap();
        let mut g = Graph::new();
        let xv = g.leaf(x);
        let av = pool2d(&mut g, xv, PoolKind::Avg).unwrap();
        assert_eq!(g.value(av).shape(), Shape::new(1, 1, 2, 2));
        assert_eq!(g.value(av).get(0, 0, 1, 1), 9.0);
        assert_eq!(g.value(av).get(0, 0, 0, 1), (3.0 + 3.0 + 6.0 + 6.0) / 4.0);

        // Replicated cells collect a double share of the average gradient.
        let loss = sum_all(&mut g, av).unwrap();
        g.backward(loss).unwrap();
        let gx = g.grad(xv).unwrap();
        assert_eq!(gx.get(0, 0, 0, 0), 0.25);
        assert_eq!(gx.get(0, 0, 0, 2), 0.5);
        assert_eq!(gx.get(0, 0, 2, 2), 1.0);
    }

    #[test]
    fn median_examples() {
        let odd = Tensor::new(
            Shape::new(1, 1, 1, 5),
            vec![1.0f64, 2.0, 3.0, 4.0, 100.0],
        )
        .unwrap();
        let mut g = Graph::new();
        let xv = g.constant(odd);
        let med = global_pool(&mut g, xv, GlobalPoolKind::Median).unwrap();
        assert_eq!(g.value(med).item(), 3.0);

        let even = Tensor::new(Shape::new(1, 1, 2, 2), vec![4.0f64, 1.0, 3.0, 2.0]).unwrap();
        let ev = g.constant(even);
        let med2 = global_pool(&mut g, ev, GlobalPoolKind::Median).unwrap();
        assert_eq!(g.value(med2).item(), 2.5);
    }

    #[test]
    fn global_pool_matches_sort_oracle() {
        let mut rng = seeded_rng(17);
        let x = rng_tensor(&mut rng, Shape::new(2, 3, 5, 4));
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let avg = global_pool(&mut g, xv, GlobalPoolKind::Avg).unwrap();
        let max = global_pool(&mut g, xv, GlobalPoolKind::Max).unwrap();
        let med = global_pool(&mut g, xv, GlobalPoolKind::Median).unwrap();
        for n in 0..2 {
            for c in 0..3 {
                let base = x.shape().row(n, c, 0);
                let mut plane: Vec<f64> = x.data()[base..base + 20].to_vec();
                plane.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let mean: f64 = plane.iter().sum::<f64>() / 20.0;
                assert!((g.value(avg).get(n, c, 0, 0) - mean).abs() < 1e-12);
                assert_eq!(g.value(max).get(n, c, 0, 0), plane[19]);
                assert_eq!(
                    g.value(med).get(n, c, 0, 0),
                    0.5 * (plane[9] + plane[10])
                );
            }
        }
    }

    #[test]
    fn median_gradient_splits_between_middle_pair() {
        let x = Tensor::new(Shape::new(1, 1, 2, 2), vec![4.0f64, 1.0, 3.0, 2.0]).unwrap();
        let mut g = Graph::new();
        let xv = g.leaf(x);
        let med = global_pool(&mut g, xv, GlobalPoolKind::Median).unwrap();
        let two = g.constant(Tensor::scalar(2.0));
        let scaled = mul(&mut g, med, two).unwrap();
        let loss = sum_all(&mut g, scaled).unwrap();
        g.backward(loss).unwrap();
        // Middle order statistics are 2.0 (idx 3) and 3.0 (idx 2).
        assert_eq!(g.grad(xv).unwrap().data(), &[0.0, 0.0, 1.0, 1.0]);
    }
}
