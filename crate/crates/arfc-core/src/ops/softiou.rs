//! Differentiable IoU surrogate on sigmoid probabilities.
//!
//! With s = σ(p) elementwise, intersection I = Σ s·y and union
//! U = Σ (s + y − s·y), the smoothed ratio is R = (I + δ)/(U + δ) and the
//! returned loss is 1 − R: zero at a perfect prediction, approaching 1 as
//! prediction and mask diverge.

use crate::error::{Error, Result};
use crate::graph::{Graph, Op, VarId};
use crate::ops::arith::sigmoid_scalar;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn check_binary<S: Scalar>(mask: &Tensor<S>) -> Result<()> {
    if mask
        .data()
        .iter()
        .any(|&v| v != S::zero() && v != S::one())
    {
        return Err(Error::Data(
            "soft_iou_loss mask must contain only 0 and 1".into(),
        ));
    }
    Ok(())
}

fn intersection_union<S: Scalar>(logits: &Tensor<S>, mask: &Tensor<S>) -> (S, S) {
    let mut i = S::zero();
    let mut u = S::zero();
    for (&p, &y) in logits.data().iter().zip(mask.data()) {
        let s = sigmoid_scalar(p);
        i = i + s * y;
        u = u + s + y - s * y;
    }
    (i, u)
}

struct SoftIouOp<S> {
    delta: S,
}

impl<S: Scalar> Op<S> for SoftIouOp<S> {
    fn name(&self) -> &'static str {
        "soft_iou_loss"
    }

    fn backward(
        &self,
        parents: &[Tensor<S>],
        _output: &Tensor<S>,
        grad: &Tensor<S>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<S>>>> {
        let (logits, mask) = (&parents[0], &parents[1]);
        let g = grad.item();
        let (i, u) = intersection_union(logits, mask);
        let num = i + self.delta;
        let den = u + self.delta;
        let inv_den2 = (den * den).recip();
        let one = S::one();
        let gp = needs[0].then(|| {
            let mut out = Tensor::zeros(logits.shape());
            {
                let d = out.data_mut();
                for (di, (&p, &y)) in d.iter_mut().zip(logits.data().iter().zip(mask.data())) {
                    let s = sigmoid_scalar(p);
                    // dR/ds = (y·den − (1−y)·num) / den²; loss = 1 − R.
                    let dr_ds = (y * den - (one - y) * num) * inv_den2;
                    *di = -g * dr_ds * s * (one - s);
                }
            }
            out
        });
        let gy = needs[1].then(|| {
            let mut out = Tensor::zeros(mask.shape());
            {
                let d = out.data_mut();
                for (di, &p) in d.iter_mut().zip(logits.data()) {
                    let s = sigmoid_scalar(p);
                    let dr_dy = (s * den - (one - s) * num) * inv_den2;
                    *di = -g * dr_dy;
                }
            }
            out
        });
        Ok(vec![gp, gy])
    }
}

/// Smoothed soft-IoU loss between logits and a binary mask; returns a scalar
/// variable. The sigmoid is applied internally, so pass raw logits.
pub fn soft_iou_loss<S: Scalar>(
    g: &mut Graph<S>,
    logits: VarId,
    mask: VarId,
    delta: S,
) -> Result<VarId> {
    let ps = g.value(logits).shape();
    let ys = g.value(mask).shape();
    if ps != ys {
        return Err(Error::shape("soft_iou_loss", ps, ys));
    }
    if delta <= S::zero() {
        return Err(Error::Config(format!("smoothing delta must be > 0, got {delta}")));
    }
    check_binary(g.value(mask))?;
    let (i, u) = intersection_union(g.value(logits), g.value(mask));
    let ratio = (i + delta) / (u + delta);
    let out = Tensor::scalar(S::one() - ratio);
    g.push_op(out, vec![logits, mask], Box::new(SoftIouOp { delta }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::shape::Shape;
    use crate::testutil::{rng_tensor, seeded_rng};
    use rand::Rng;

    fn random_mask(rng: &mut impl Rng, shape: Shape) -> Tensor<f64> {
        Tensor::from_fn(shape, |_, _, _, _| if rng.gen_bool(0.3) { 1.0 } else { 0.0 })
    }

    #[test]
    fn perfect_prediction_gives_exactly_zero() {
        let mut rng = seeded_rng(41);
        let shape = Shape::new(2, 1, 8, 8);
        let mask = random_mask(&mut rng, shape);
        // ±1000 saturates the sigmoid to exactly 1/0 in f64.
        let logits = mask.map(|v| if v == 1.0 { 1000.0 } else { -1000.0 });
        let mut g = Graph::new();
        let (pi, yi) = (g.leaf(logits), g.constant(mask));
        let loss = soft_iou_loss(&mut g, pi, yi, 1.0).unwrap();
        assert_eq!(g.value(loss).item(), 0.0);
    }

    #[test]
    fn all_zero_prediction_gives_t_over_t_plus_one() {
        let mut rng = seeded_rng(42);
        let shape = Shape::new(1, 1, 16, 16);
        let mask = random_mask(&mut rng, shape);
        let t = mask.data().iter().filter(|&&v| v == 1.0).count() as f64;
        assert!(t > 0.0);
        let logits = Tensor::full(shape, -1000.0);
        let mut g = Graph::new();
        let (pi, yi) = (g.leaf(logits), g.constant(mask));
        let loss = soft_iou_loss(&mut g, pi, yi, 1.0).unwrap();
        assert!((g.value(loss).item() - t / (t + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn matches_explicit_sum_oracle() {
        let mut rng = seeded_rng(43);
        let shape = Shape::new(2, 1, 6, 6);
        let logits = rng_tensor::<f64>(&mut rng, shape);
        let mask = random_mask(&mut rng, shape);
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let mut i = 0.0;
        let mut u = 0.0;
        for (&p, &y) in logits.data().iter().zip(mask.data()) {
            i += sig(p) * y;
            u += sig(p) + y - sig(p) * y;
        }
        let want = 1.0 - (i + 1.0) / (u + 1.0);
        let mut g = Graph::new();
        let (pi, yi) = (g.leaf(logits), g.constant(mask));
        let loss = soft_iou_loss(&mut g, pi, yi, 1.0).unwrap();
        assert!((g.value(loss).item() - want).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = seeded_rng(44);
        let shape = Shape::new(1, 1, 4, 4);
        let logits = rng_tensor::<f64>(&mut rng, shape);
        let mask = random_mask(&mut rng, shape);
        let mut g = Graph::new();
        let (pi, yi) = (g.leaf(logits.clone()), g.constant(mask.clone()));
        let loss = soft_iou_loss(&mut g, pi, yi, 1.0).unwrap();
        g.backward(loss).unwrap();
        let analytic = g.grad(pi).unwrap().clone();
        let h = 1e-6;
        for idx in [0usize, 5, 10, 15] {
            let eval = |bump: f64| {
                let mut p = logits.clone();
                p.data_mut()[idx] += bump;
                let mut g2 = Graph::new();
                let (pi2, yi2) = (g2.leaf(p), g2.constant(mask.clone()));
                let l = soft_iou_loss(&mut g2, pi2, yi2, 1.0).unwrap();
                g2.value(l).item()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[idx];
            assert!(
                (fd - a).abs() / a.abs().max(1e-8) < 1e-6,
                "coord {idx}: fd {fd} vs analytic {a}"
            );
        }
    }

    #[test]
    fn loss_stays_in_unit_interval() {
        let mut rng = seeded_rng(45);
        for round in 0..20 {
            let shape = Shape::new(1, 1, 5, 5);
            let logits = rng_tensor::<f64>(&mut rng, shape).map(|v| v * 10.0);
            let mask = random_mask(&mut rng, shape);
            let mut g = Graph::new();
            let (pi, yi) = (g.leaf(logits), g.constant(mask));
            let loss = soft_iou_loss(&mut g, pi, yi, 1.0).unwrap();
            let v = g.value(loss).item();
            assert!((0.0..1.0).contains(&v), "round {round}: loss {v}");
        }
    }

    #[test]
    fn non_binary_mask_rejected() {
        let shape = Shape::new(1, 1, 2, 2);
        let mut g = Graph::<f32>::new();
        let pi = g.leaf(Tensor::zeros(shape));
        let yi = g.constant(Tensor::full(shape, 0.5));
        assert!(soft_iou_loss(&mut g, pi, yi, 1.0).is_err());
    }

    #[test]
    fn empty_mask_empty_prediction_is_perfect() {
        let shape = Shape::new(1, 1, 3, 3);
        let mut g = Graph::<f64>::new();
        let pi = g.leaf(Tensor::full(shape, -1000.0));
        let yi = g.constant(Tensor::zeros(shape));
        let loss = soft_iou_loss(&mut g, pi, yi, 1.0).unwrap();
        assert_eq!(g.value(loss).item(), 0.0);
    }
}
