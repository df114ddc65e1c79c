//! Skip-connection fusion of a shallow feature map with the next-deeper one:
//! align the deep map to the shallow shape, pair up four channel groups from
//! each side, run each pair through its own dilated convolution, and project
//! the reassembled stack back to the shallow width.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{ParamStore, VarId};
use crate::layers::{Conv2dLayer, Fwd, LayerNorm2d};
use crate::ops::{bilinear_upsample_x2, concat_channels, slice_channels, Conv2dSpec};
use crate::scalar::Scalar;

/// Dilation rates of the four group convolutions, in group order.
pub const GROUP_DILATIONS: [usize; 4] = [1, 2, 5, 7];

/// Fuses a shallow ("low-level") feature map with the next-deeper
/// ("high-level") one. The deep input is channel-adjusted by a
/// depthwise-separable convolution and doubled in resolution by bilinear
/// interpolation so it matches the shallow map exactly; both are then split
/// into four channel groups, paired group-for-group, and fused.
pub struct HlffBlock {
    align_dw: Conv2dLayer,
    align_pw: Conv2dLayer,
    group_ln: LayerNorm2d,
    group_convs: Vec<Conv2dLayer>,
    out_ln: LayerNorm2d,
    out_proj: Conv2dLayer,
    low_channels: usize,
    high_channels: usize,
}

impl HlffBlock {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut impl Rng,
        name: &str,
        low_channels: usize,
        high_channels: usize,
    ) -> Result<Self> {
        if low_channels == 0 || low_channels % 4 != 0 {
            return Err(Error::Config(format!(
                "fusion block needs shallow channels divisible by 4, got {low_channels}"
            )));
        }
        if high_channels == 0 {
            return Err(Error::Config("fusion block needs deep channels > 0".into()));
        }
        let group_in = low_channels / 2;
        let group_out = low_channels / 4;
        let group_convs = GROUP_DILATIONS
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                Conv2dLayer::new(
                    store,
                    rng,
                    &format!("{name}.group{}", i + 1),
                    Conv2dSpec::same(group_in, group_out, 3, 3, d),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(HlffBlock {
            align_dw: Conv2dLayer::new(
                store,
                rng,
                &format!("{name}.align.dw"),
                Conv2dSpec::depthwise(high_channels, 3, 3).with_bias(false),
            )?,
            align_pw: Conv2dLayer::new(
                store,
                rng,
                &format!("{name}.align.pw"),
                Conv2dSpec::pointwise(high_channels, low_channels),
            )?,
            group_ln: LayerNorm2d::new(store, &format!("{name}.group_ln"), group_in)?,
            group_convs,
            out_ln: LayerNorm2d::new(store, &format!("{name}.out_ln"), low_channels)?,
            out_proj: Conv2dLayer::new(
                store,
                rng,
                &format!("{name}.out"),
                Conv2dSpec::pointwise(low_channels, low_channels),
            )?,
            low_channels,
            high_channels,
        })
    }

    pub fn low_channels(&self) -> usize {
        self.low_channels
    }

    pub fn high_channels(&self) -> usize {
        self.high_channels
    }

    /// Channel-adjust and upsample the deep input to the shallow geometry.
    fn align<S: Scalar>(&self, f: &mut Fwd<S>, high: VarId) -> Result<VarId> {
        let h = self.align_dw.forward(f, high)?;
        let h = self.align_pw.forward(f, h)?;
        bilinear_upsample_x2(f.graph, h)
    }

    /// `low` at (N, C_low, H, W), `high` one stage deeper at
    /// (N, C_high, H/2, W/2). Output matches `low`'s shape.
    pub fn forward<S: Scalar>(&self, f: &mut Fwd<S>, low: VarId, high: VarId) -> Result<VarId> {
        let ls = f.graph.value(low).shape();
        let hs = f.graph.value(high).shape();
        if ls.c != self.low_channels || hs.c != self.high_channels {
            return Err(Error::ShapeMismatch {
                context: "fusion channels".into(),
                left: format!("({}, {})", ls.c, hs.c),
                right: format!("({}, {})", self.low_channels, self.high_channels),
            });
        }
        if hs.n != ls.n || hs.h * 2 != ls.h || hs.w * 2 != ls.w {
            return Err(Error::ShapeMismatch {
                context: "fusion resolution (deep input must be exactly half)".into(),
                left: hs.to_string(),
                right: ls.to_string(),
            });
        }

        let aligned = self.align(f, high)?;
        let q = self.low_channels / 4;
        let mut fused = Vec::with_capacity(4);
        for (i, conv) in self.group_convs.iter().enumerate() {
            let xh = slice_channels(f.graph, aligned, i * q, q)?;
            let xl = slice_channels(f.graph, low, i * q, q)?;
            let pair = concat_channels(f.graph, &[xh, xl])?;
            let pair = self.group_ln.forward(f, pair)?;
            fused.push(conv.forward(f, pair)?);
        }
        let cat = concat_channels(f.graph, &fused)?;
        let cat = self.out_ln.forward(f, cat)?;
        self.out_proj.forward(f, cat)
    }
}

/// Plain skip fusion used when the block is ablated away: upsample the deep
/// input bilinearly and concatenate along channels. No parameters.
pub fn upsample_concat<S: Scalar>(f: &mut Fwd<S>, low: VarId, high: VarId) -> Result<VarId> {
    let up = bilinear_upsample_x2(f.graph, high)?;
    let us = f.graph.value(up).shape();
    let ls = f.graph.value(low).shape();
    if us.h != ls.h || us.w != ls.w || us.n != ls.n {
        return Err(Error::ShapeMismatch {
            context: "skip concat".into(),
            left: us.to_string(),
            right: ls.to_string(),
        });
    }
    concat_channels(f.graph, &[up, low])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use crate::graph::{Graph, Mode};
    use crate::layers::run_eval;
    use crate::ops::{sum_all, LN_EPS};
    use crate::shape::Shape;
    use crate::tensor::Tensor;
    use crate::testutil::{conv2d_oracle, rng_tensor, seeded_rng};

    fn build(low_c: usize, high_c: usize, seed: u64) -> (ParamStore<f64>, HlffBlock) {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(seed);
        let block = HlffBlock::new(&mut store, &mut rng, "f", low_c, high_c).unwrap();
        (store, block)
    }

    #[test]
    fn output_shape_matches_the_shallow_input() {
        let (store, block) = build(8, 16, 11);
        let mut rng = seeded_rng(12);
        let low = rng_tensor::<f64>(&mut rng, Shape::new(2, 8, 16, 12));
        let high = rng_tensor::<f64>(&mut rng, Shape::new(2, 16, 8, 6));
        let (graph, y) = run_eval(&store, |f| {
            let l = f.graph.leaf(low);
            let h = f.graph.leaf(high);
            block.forward(f, l, h)
        })
        .unwrap();
        assert_eq!(graph.value(y).shape(), Shape::new(2, 8, 16, 12));
    }

    #[test]
    fn group_convs_use_the_pinned_dilations_and_stay_same_size() {
        let (_, block) = build(8, 16, 13);
        for (conv, d) in block.group_convs.iter().zip(GROUP_DILATIONS) {
            assert_eq!(conv.spec.dilation, d);
            assert_eq!(conv.spec.in_channels, 4);
            assert_eq!(conv.spec.out_channels, 2);
            assert_eq!(conv.spec.out_hw(16, 12).unwrap(), (16, 12));
        }
    }

    #[test]
    fn indivisible_channels_and_wrong_resolution_are_rejected() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = seeded_rng(17);
        assert!(matches!(
            HlffBlock::new(&mut store, &mut rng, "b", 6, 8),
            Err(Error::Config(_))
        ));

        let (store, block) = build(8, 16, 19);
        let mut rng = seeded_rng(20);
        let low = rng_tensor::<f64>(&mut rng, Shape::new(1, 8, 16, 16));
        let high = rng_tensor::<f64>(&mut rng, Shape::new(1, 16, 16, 16));
        let err = run_eval(&store, |f| {
            let l = f.graph.leaf(low);
            let h = f.graph.leaf(high);
            block.forward(f, l, h)
        });
        assert!(matches!(err, Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn four_group_split_concatenated_back_is_the_identity() {
        let mut rng = seeded_rng(23);
        let x = rng_tensor::<f64>(&mut rng, Shape::new(2, 8, 4, 4));
        let mut g = Graph::<f64>::new();
        let xv = g.leaf(x.clone());
        let groups: Vec<VarId> = (0..4)
            .map(|i| slice_channels(&mut g, xv, i * 2, 2).unwrap())
            .collect();
        let back = concat_channels(&mut g, &groups).unwrap();
        assert_eq!(g.value(back).data(), x.data());
    }

    #[test]
    fn zero_deep_input_makes_the_output_independent_of_alignment_weights() {
        let (mut store, block) = build(8, 16, 29);
        let mut rng = seeded_rng(30);
        let low = rng_tensor::<f64>(&mut rng, Shape::new(1, 8, 8, 8));
        let high = Tensor::<f64>::zeros(Shape::new(1, 16, 4, 4));

        let forward = |store: &ParamStore<f64>| {
            let (graph, y) = run_eval(store, |f| {
                let l = f.graph.leaf(low.clone());
                let h = f.graph.leaf(high.clone());
                block.forward(f, l, h)
            })
            .unwrap();
            graph.value(y).clone()
        };

        // Zero the pointwise bias so the aligned map is exactly zero, then
        // scramble the alignment weights: nothing may change.
        let bid = store.find("f.align.pw.bias").unwrap();
        store
            .set_value(bid, Tensor::zeros(Shape::new(1, 8, 1, 1)))
            .unwrap();
        let before = forward(&store);
        for name in ["f.align.dw.weight", "f.align.pw.weight"] {
            let id = store.find(name).unwrap();
            let shape = store.value(id).shape();
            store
                .set_value(id, rng_tensor::<f64>(&mut rng, shape))
                .unwrap();
        }
        let after = forward(&store);
        assert_eq!(before.data(), after.data());
    }

    #[test]
    fn forward_matches_the_unrolled_group_by_group_oracle() {
        let low_c = 8;
        let high_c = 12;
        let (h, w) = (6, 8);
        let (mut store, block) = build(low_c, high_c, 31);
        let mut rng = seeded_rng(32);
        // Exercise the affine part of both normalizations.
        for name in ["f.group_ln", "f.out_ln"] {
            for part in ["gamma", "beta"] {
                let id = store.find(&format!("{name}.{part}")).unwrap();
                let shape = store.value(id).shape();
                store
                    .set_value(id, rng_tensor::<f64>(&mut rng, shape))
                    .unwrap();
            }
        }
        let low = rng_tensor::<f64>(&mut rng, Shape::new(2, low_c, h, w));
        let high = rng_tensor::<f64>(&mut rng, Shape::new(2, high_c, h / 2, w / 2));

        let (graph, y) = run_eval(&store, |f| {
            let l = f.graph.leaf(low.clone());
            let hi = f.graph.leaf(high.clone());
            block.forward(f, l, hi)
        })
        .unwrap();

        // --- CPU oracle ------------------------------------------------
        let weight = |n: &str| store.value(store.find(n).unwrap()).clone();
        let ln = |x: &Tensor<f64>, gamma: &Tensor<f64>, beta: &Tensor<f64>| {
            let s = x.shape();
            let mut out = Tensor::<f64>::zeros(s);
            let sample = s.c * s.h * s.w;
            for n in 0..s.n {
                let base = s.row(n, 0, 0);
                let mu: f64 = x.data()[base..base + sample].iter().sum::<f64>() / sample as f64;
                let var: f64 = x.data()[base..base + sample]
                    .iter()
                    .map(|v| (v - mu) * (v - mu))
                    .sum::<f64>()
                    / sample as f64;
                let inv = 1.0 / (var + LN_EPS).sqrt();
                for c in 0..s.c {
                    for y in 0..s.h {
                        for xx in 0..s.w {
                            let v = (x.get(n, c, y, xx) - mu) * inv;
                            out.set(n, c, y, xx, gamma.get(0, c, 0, 0) * v + beta.get(0, c, 0, 0));
                        }
                    }
                }
            }
            out
        };
        let add_bias_t = |x: &Tensor<f64>, b: &Tensor<f64>| {
            Tensor::from_fn(x.shape(), |n, c, y, xx| x.get(n, c, y, xx) + b.get(0, c, 0, 0))
        };
        let slice = |x: &Tensor<f64>, start: usize, len: usize| {
            Tensor::from_fn(
                Shape::new(x.shape().n, len, x.shape().h, x.shape().w),
                |n, c, y, xx| x.get(n, start + c, y, xx),
            )
        };
        let cat = |parts: &[&Tensor<f64>]| {
            let s0 = parts[0].shape();
            let total: usize = parts.iter().map(|p| p.shape().c).sum();
            Tensor::from_fn(Shape::new(s0.n, total, s0.h, s0.w), |n, mut c, y, xx| {
                for p in parts {
                    if c < p.shape().c {
                        return p.get(n, c, y, xx);
                    }
                    c -= p.shape().c;
                }
                unreachable!()
            })
        };

        // Align: depthwise 3×3 → pointwise + bias → bilinear ×2. Bilinear is
        // verified against a closed form in its own module, so reuse the op.
        let dw_spec = Conv2dSpec::depthwise(high_c, 3, 3).with_bias(false);
        let dw = conv2d_oracle(&high, &weight("f.align.dw.weight"), &dw_spec);
        let pw_spec = Conv2dSpec::pointwise(high_c, low_c);
        let pw = conv2d_oracle(&dw, &weight("f.align.pw.weight"), &pw_spec);
        let pw = add_bias_t(&pw, &weight("f.align.pw.bias"));
        let mut g2 = Graph::<f64>::new();
        let pwv = g2.constant(pw);
        let aligned = bilinear_upsample_x2(&mut g2, pwv).unwrap();
        let aligned = g2.value(aligned).clone();

        let g_gamma = weight("f.group_ln.gamma");
        let g_beta = weight("f.group_ln.beta");
        let q = low_c / 4;
        let mut fused = Vec::new();
        for (i, &d) in GROUP_DILATIONS.iter().enumerate() {
            let pair = cat(&[&slice(&aligned, i * q, q), &slice(&low, i * q, q)]);
            let pair = ln(&pair, &g_gamma, &g_beta);
            let spec = Conv2dSpec::same(low_c / 2, q, 3, 3, d);
            let conv = conv2d_oracle(&pair, &weight(&format!("f.group{}.weight", i + 1)), &spec);
            fused.push(add_bias_t(&conv, &weight(&format!("f.group{}.bias", i + 1))));
        }
        let refs: Vec<&Tensor<f64>> = fused.iter().collect();
        let stacked = ln(&cat(&refs), &weight("f.out_ln.gamma"), &weight("f.out_ln.beta"));
        let out_spec = Conv2dSpec::pointwise(low_c, low_c);
        let out = conv2d_oracle(&stacked, &weight("f.out.weight"), &out_spec);
        let expected = add_bias_t(&out, &weight("f.out.bias"));

        for (a, e) in graph.value(y).data().iter().zip(expected.data()) {
            assert!((a - e).abs() < 1e-5, "{a} vs {e}");
        }
    }

    #[test]
    fn full_block_gradient_passes_finite_difference_check() {
        let (store, block) = build(4, 8, 37);
        let mut rng = seeded_rng(38);
        let low = rng_tensor::<f64>(&mut rng, Shape::new(1, 4, 4, 4));
        let high = rng_tensor::<f64>(&mut rng, Shape::new(1, 8, 2, 2));
        let report = check_gradients(&[low, high], &mut |g: &mut Graph<f64>, vars: &[VarId]| {
            let mut f = Fwd::new(g, &store, Mode::Eval);
            let y = block.forward(&mut f, vars[0], vars[1])?;
            sum_all(g, y)
        })
        .unwrap();
        assert!(report.passes(), "{report}");
    }

    #[test]
    fn plain_upsample_concat_stacks_deep_over_shallow() {
        let store = ParamStore::<f64>::new();
        let mut rng = seeded_rng(41);
        let low = rng_tensor::<f64>(&mut rng, Shape::new(1, 2, 4, 4));
        let high = Tensor::full(Shape::new(1, 3, 2, 2), 5.0);
        let (graph, y) = run_eval(&store, |f| {
            let l = f.graph.leaf(low.clone());
            let h = f.graph.leaf(high);
            upsample_concat(f, l, h)
        })
        .unwrap();
        let yv = graph.value(y);
        assert_eq!(yv.shape(), Shape::new(1, 5, 4, 4));
        for c in 0..3 {
            for h in 0..4 {
                for w in 0..4 {
                    assert_eq!(yv.get(0, c, h, w), 5.0);
                }
            }
        }
        for c in 0..2 {
            for h in 0..4 {
                for w in 0..4 {
                    assert_eq!(yv.get(0, 3 + c, h, w), low.get(0, c, h, w));
                }
            }
        }
    }
}
