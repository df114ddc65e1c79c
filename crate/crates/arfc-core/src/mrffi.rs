//! Gated multi-expert convolution: three specialist branches — multi-scale
//! dilated, deformable, and multi-directional difference convolution — mixed
//! per sample by a softmax gate over pooled features.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Op, ParamId, ParamStore, VarId};
use crate::layers::{
    kaiming_uniform, BatchNorm2d, Conv2dLayer, ConvBnRelu, Fwd,
};
use crate::ops::{
    add, broadcast_spatial, concat_channels, conv2d, deform_conv2d, global_pool, mul, relu,
    sigmoid, slice_channels, softmax_channels, Conv2dSpec, GlobalPoolKind,
};
use crate::scalar::Scalar;
use crate::shape::Shape;
use crate::tensor::Tensor;

/// Hidden width of the gate's scoring perceptron.
pub const GATE_HIDDEN: usize = 16;

/// Sampling neighborhoods of the two difference convolutions, as (dy, dx)
/// around the center: one plus-shaped, one X-shaped, both including the
/// (inert) center tap.
pub const HV_POINTS: [(i32, i32); 5] = [(-1, 0), (0, -1), (0, 0), (0, 1), (1, 0)];
pub const DG_POINTS: [(i32, i32); 5] = [(-1, -1), (-1, 1), (0, 0), (1, -1), (1, 1)];

// ---------------------------------------------------------------------------
// Multi-scale dilated branch
// ---------------------------------------------------------------------------

/// Three dilated 3×3 convolutions (rates 1, 2, 3) plus a pooled global
/// branch, concatenated and fused by a 1×1 convolution. Every convolution is
/// followed by batch norm and ReLU except the global projection.
pub struct MsdcBranch {
    dilated: Vec<ConvBnRelu>,
    gap_proj: Conv2dLayer,
    fuse: ConvBnRelu,
}

impl MsdcBranch {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut impl Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
    ) -> Result<Self> {
        let mid = (out_channels / 4).max(1);
        let dilated = (1..=3)
            .map(|d| {
                ConvBnRelu::new(
                    store,
                    rng,
                    &format!("{name}.d{d}"),
                    Conv2dSpec::same(in_channels, mid, 3, 3, d),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MsdcBranch {
            dilated,
            gap_proj: Conv2dLayer::new(
                store,
                rng,
                &format!("{name}.gap"),
                Conv2dSpec::pointwise(in_channels, mid),
            )?,
            fuse: ConvBnRelu::new(
                store,
                rng,
                &format!("{name}.fuse"),
                Conv2dSpec::pointwise(4 * mid, out_channels),
            )?,
        })
    }

    pub fn forward<S: Scalar>(&self, f: &mut Fwd<S>, x: VarId) -> Result<VarId> {
        let shape = f.graph.value(x).shape();
        let mut parts = Vec::with_capacity(4);
        for conv in &self.dilated {
            parts.push(conv.forward(f, x)?);
        }
        let pooled = global_pool(f.graph, x, GlobalPoolKind::Avg)?;
        let pooled = self.gap_proj.forward(f, pooled)?;
        parts.push(broadcast_spatial(f.graph, pooled, shape.h, shape.w)?);
        let cat = concat_channels(f.graph, &parts)?;
        self.fuse.forward(f, cat)
    }
}

// ---------------------------------------------------------------------------
// Deformable branch
// ---------------------------------------------------------------------------

/// A 3×3 deformable convolution whose per-tap offsets and modulation gates
/// are predicted from the input by zero-initialized convolutions, so the
/// branch starts out as a half-strength regular convolution.
pub struct DcnBranch {
    offset_conv: Conv2dLayer,
    modulation_conv: Conv2dLayer,
    weight: ParamId,
}

impl DcnBranch {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut impl Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
    ) -> Result<Self> {
        let weight = kaiming_uniform(
            rng,
            Shape::new(out_channels, in_channels, 3, 3),
            in_channels * 9,
        );
        Ok(DcnBranch {
            offset_conv: Conv2dLayer::new_zeroed(
                store,
                &format!("{name}.offset"),
                Conv2dSpec::same(in_channels, 18, 3, 3, 1),
            )?,
            modulation_conv: Conv2dLayer::new_zeroed(
                store,
                &format!("{name}.modulation"),
                Conv2dSpec::same(in_channels, 9, 3, 3, 1),
            )?,
            weight: store.register(format!("{name}.weight"), weight, true)?,
        })
    }

    /// The raw deformable convolution, before any normalization.
    pub fn forward<S: Scalar>(&self, f: &mut Fwd<S>, x: VarId) -> Result<VarId> {
        let offsets = self.offset_conv.forward(f, x)?;
        let modulation = self.modulation_conv.forward(f, x)?;
        let modulation = sigmoid(f.graph, modulation)?;
        let w = f.param(self.weight);
        deform_conv2d(f.graph, x, w, offsets, modulation)
    }

    pub fn weight_id(&self) -> ParamId {
        self.weight
    }
}

// ---------------------------------------------------------------------------
// Difference branch
// ---------------------------------------------------------------------------

/// Scatter 5-point difference weights into an equivalent 3×3 kernel: each
/// tap keeps its weight and the center accumulates minus their sum, so a
/// constant input always maps to zero. Linear, hence self-explanatory to
/// differentiate: the adjoint gathers tap-minus-center gradients.
struct DifferenceReparamOp {
    points: [(i32, i32); 5],
}

fn reparam_forward<S: Scalar>(w: &Tensor<S>, points: &[(i32, i32); 5]) -> Tensor<S> {
    let s = w.shape();
    let mut k = Tensor::zeros(Shape::new(s.n, s.c, 3, 3));
    for o in 0..s.n {
        for i in 0..s.c {
            for (p, &(dy, dx)) in points.iter().enumerate() {
                let v = w.get(o, i, 0, p);
                let (ky, kx) = ((dy + 1) as usize, (dx + 1) as usize);
                k.set(o, i, ky, kx, k.get(o, i, ky, kx) + v);
                k.set(o, i, 1, 1, k.get(o, i, 1, 1) - v);
            }
        }
    }
    k
}

impl<S: Scalar> Op<S> for DifferenceReparamOp {
    fn name(&self) -> &'static str {
        "difference_reparam"
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
        let s = parents[0].shape();
        let mut gw = Tensor::zeros(s);
        for o in 0..s.n {
            for i in 0..s.c {
                let center = grad.get(o, i, 1, 1);
                for (p, &(dy, dx)) in self.points.iter().enumerate() {
                    let tap = grad.get(o, i, (dy + 1) as usize, (dx + 1) as usize);
                    gw.set(o, i, 0, p, tap - center);
                }
            }
        }
        Ok(vec![Some(gw)])
    }
}

fn difference_reparam<S: Scalar>(
    g: &mut Graph<S>,
    w: VarId,
    points: [(i32, i32); 5],
) -> Result<VarId> {
    let out = reparam_forward(g.value(w), &points);
    g.push_op(out, vec![w], Box::new(DifferenceReparamOp { points }))
}

/// Two central-difference convolutions over sparse neighborhoods — one
/// plus-shaped (horizontal/vertical), one X-shaped (diagonal) — summed
/// elementwise. Runs as standard convolutions with reparameterized kernels.
pub struct MddcBranch {
    hv: ParamId,
    dg: ParamId,
    spec: Conv2dSpec,
}

impl MddcBranch {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut impl Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
    ) -> Result<Self> {
        let shape = Shape::new(out_channels, in_channels, 1, 5);
        let fan_in = in_channels * 5;
        Ok(MddcBranch {
            hv: store.register(
                format!("{name}.hv"),
                kaiming_uniform::<S>(rng, shape, fan_in),
                true,
            )?,
            dg: store.register(
                format!("{name}.dg"),
                kaiming_uniform::<S>(rng, shape, fan_in),
                true,
            )?,
            spec: Conv2dSpec::same(in_channels, out_channels, 3, 3, 1).with_bias(false),
        })
    }

    /// The raw difference convolution, before any normalization.
    pub fn forward<S: Scalar>(&self, f: &mut Fwd<S>, x: VarId) -> Result<VarId> {
        let hv = f.param(self.hv);
        let dg = f.param(self.dg);
        let k_hv = difference_reparam(f.graph, hv, HV_POINTS)?;
        let k_dg = difference_reparam(f.graph, dg, DG_POINTS)?;
        let y_hv = conv2d(f.graph, x, k_hv, &self.spec)?;
        let y_dg = conv2d(f.graph, x, k_dg, &self.spec)?;
        add(f.graph, y_hv, y_dg)
    }

    pub fn hv_id(&self) -> ParamId {
        self.hv
    }

    pub fn dg_id(&self) -> ParamId {
        self.dg
    }
}

// ---------------------------------------------------------------------------
// Gate
// ---------------------------------------------------------------------------

/// Scores the three experts from globally pooled features: average pool →
/// hidden perceptron layer → ReLU → three raw scores → softmax. One weight
/// triple per sample.
pub struct GatedUnit {
    fc1: Conv2dLayer,
    fc2: Conv2dLayer,
}

impl GatedUnit {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut impl Rng,
        name: &str,
        in_channels: usize,
    ) -> Result<Self> {
        Ok(GatedUnit {
            fc1: Conv2dLayer::new(
                store,
                rng,
                &format!("{name}.fc1"),
                Conv2dSpec::pointwise(in_channels, GATE_HIDDEN),
            )?,
            fc2: Conv2dLayer::new(
                store,
                rng,
                &format!("{name}.fc2"),
                Conv2dSpec::pointwise(GATE_HIDDEN, 3),
            )?,
        })
    }

    /// Per-sample expert weights, shape (N, 3, 1, 1): nonnegative, summing
    /// to one.
    pub fn forward<S: Scalar>(&self, f: &mut Fwd<S>, x: VarId) -> Result<VarId> {
        let pooled = global_pool(f.graph, x, GlobalPoolKind::Avg)?;
        let h = self.fc1.forward(f, pooled)?;
        let h = relu(f.graph, h)?;
        let scores = self.fc2.forward(f, h)?;
        softmax_channels(f.graph, scores)
    }
}

// ---------------------------------------------------------------------------
// The full module
// ---------------------------------------------------------------------------

/// The gated three-expert convolution block. All experts always execute and
/// their outputs are mixed per sample by the gate's softmax weights. The
/// deformable and difference experts get a batch-norm + ReLU wrapper so all
/// three produce outputs on a comparable scale.
pub struct MrffiConv {
    msdc: MsdcBranch,
    dcn: DcnBranch,
    dcn_bn: BatchNorm2d,
    mddc: MddcBranch,
    mddc_bn: BatchNorm2d,
    gate: GatedUnit,
    in_channels: usize,
    out_channels: usize,
    /// Override the gate with fixed expert weights. Probing hook: gradients
    /// stop flowing through the gate while it is pinned.
    pub pinned_gate: Option<[f64; 3]>,
}

impl MrffiConv {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut impl Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::Config(format!(
                "expert block needs nonzero channel counts, got {in_channels}→{out_channels}"
            )));
        }
        Ok(MrffiConv {
            msdc: MsdcBranch::new(store, rng, &format!("{name}.msdc"), in_channels, out_channels)?,
            dcn: DcnBranch::new(store, rng, &format!("{name}.dcn"), in_channels, out_channels)?,
            dcn_bn: BatchNorm2d::new(store, &format!("{name}.dcn.bn"), out_channels)?,
            mddc: MddcBranch::new(store, rng, &format!("{name}.mddc"), in_channels, out_channels)?,
            mddc_bn: BatchNorm2d::new(store, &format!("{name}.mddc.bn"), out_channels)?,
            gate: GatedUnit::new(store, rng, &format!("{name}.gate"), in_channels)?,
            in_channels,
            out_channels,
            pinned_gate: None,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// Per-sample gate weights for this input, shape (N, 3, 1, 1).
    pub fn gate_weights<S: Scalar>(&self, f: &mut Fwd<S>, x: VarId) -> Result<VarId> {
        match self.pinned_gate {
            Some(w) => {
                let n = f.graph.value(x).shape().n;
                let t = Tensor::from_fn(Shape::new(n, 3, 1, 1), |_, c, _, _| S::from_f64(w[c]));
                Ok(f.graph.constant(t))
            }
            None => self.gate.forward(f, x),
        }
    }

    pub fn forward<S: Scalar>(&self, f: &mut Fwd<S>, x: VarId) -> Result<VarId> {
        let shape = f.graph.value(x).shape();
        if shape.c != self.in_channels {
            return Err(Error::Dimension(format!(
                "expert block built for {} input channels got {}",
                self.in_channels, shape.c
            )));
        }
        let e1 = self.msdc.forward(f, x)?;
        let e2 = self.dcn.forward(f, x)?;
        let e2 = self.dcn_bn.forward(f, e2)?;
        let e2 = relu(f.graph, e2)?;
        let e3 = self.mddc.forward(f, x)?;
        let e3 = self.mddc_bn.forward(f, e3)?;
        let e3 = relu(f.graph, e3)?;

        let gate = self.gate_weights(f, x)?;
        let mut mixed = None;
        for (i, expert) in [e1, e2, e3].into_iter().enumerate() {
            let wi = slice_channels(f.graph, gate, i, 1)?;
            let scaled = mul(f.graph, expert, wi)?;
            mixed = Some(match mixed {
                None => scaled,
                Some(acc) => add(f.graph, acc, scaled)?,
            });
        }
        Ok(mixed.expect("three experts"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use crate::graph::Mode;
    use crate::layers::run_eval;
    use crate::ops::{sum_all, BN_EPS};
    use crate::testutil::{conv2d_oracle, rng_tensor, seeded_rng};

    fn build(cin: usize, cout: usize, seed: u64) -> (ParamStore<f64>, MrffiConv) {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(seed);
        let block = MrffiConv::new(&mut store, &mut rng, "m", cin, cout).unwrap();
        (store, block)
    }

    // ------------------------------------------------------------------
    // MSDC
    // ------------------------------------------------------------------

    #[test]
    fn msdc_preserves_spatial_dims_and_zero_weights_give_zero_output() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = seeded_rng(61);
        let branch = MsdcBranch::new(&mut store, &mut rng, "s", 3, 8).unwrap();

        let x = rng_tensor::<f64>(&mut rng, Shape::new(2, 3, 9, 7));
        let (graph, y) = run_eval(&store, |f| {
            let xv = f.graph.leaf(x.clone());
            branch.forward(f, xv)
        })
        .unwrap();
        assert_eq!(graph.value(y).shape(), Shape::new(2, 8, 9, 7));

        // Zero every convolution; batch-norm affine stays at identity.
        for name in ["s.d1.conv", "s.d2.conv", "s.d3.conv", "s.fuse.conv"] {
            let id = store.find(&format!("{name}.weight")).unwrap();
            let shape = store.value(id).shape();
            store.set_value(id, Tensor::zeros(shape)).unwrap();
        }
        for name in ["s.gap.weight", "s.gap.bias"] {
            let id = store.find(name).unwrap();
            let shape = store.value(id).shape();
            store.set_value(id, Tensor::zeros(shape)).unwrap();
        }
        let (graph, y) = run_eval(&store, |f| {
            let xv = f.graph.leaf(x);
            branch.forward(f, xv)
        })
        .unwrap();
        assert!(graph.value(y).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn msdc_matches_branch_by_branch_oracle() {
        let cin = 3;
        let cout = 8;
        let mid = 2;
        let mut store = ParamStore::<f64>::new();
        let mut rng = seeded_rng(67);
        let branch = MsdcBranch::new(&mut store, &mut rng, "s", cin, cout).unwrap();
        let x = rng_tensor::<f64>(&mut rng, Shape::new(1, cin, 6, 6));

        let (graph, y) = run_eval(&store, |f| {
            let xv = f.graph.leaf(x.clone());
            branch.forward(f, xv)
        })
        .unwrap();

        // Recompute with the explicit pipeline: fresh batch norm in eval
        // mode is x/√(1+ε) per channel.
        let bn = |t: &Tensor<f64>| t.map(|v| v / (1.0 + BN_EPS).sqrt());
        let relu_t = |t: &Tensor<f64>| t.map(|v| v.max(0.0));
        let weight = |n: &str| store.value(store.find(n).unwrap()).clone();

        let mut parts: Vec<Tensor<f64>> = Vec::new();
        for d in 1..=3 {
            let spec = Conv2dSpec::same(cin, mid, 3, 3, d);
            let conv = conv2d_oracle(&x, &weight(&format!("s.d{d}.conv.weight")), &spec);
            parts.push(relu_t(&bn(&conv)));
        }
        // Global branch: plane means → 1×1 conv (a matmul) + bias, broadcast.
        let mut pooled = Tensor::<f64>::zeros(Shape::new(1, cin, 1, 1));
        for c in 0..cin {
            let row = x.shape().row(0, c, 0);
            let plane = x.shape().plane_len();
            let mean: f64 =
                x.data()[row..row + plane].iter().sum::<f64>() / plane as f64;
            pooled.set(0, c, 0, 0, mean);
        }
        let gw = weight("s.gap.weight");
        let gb = weight("s.gap.bias");
        let mut gap = Tensor::<f64>::zeros(Shape::new(1, mid, 6, 6));
        for o in 0..mid {
            let mut acc = gb.get(0, o, 0, 0);
            for i in 0..cin {
                acc += gw.get(o, i, 0, 0) * pooled.get(0, i, 0, 0);
            }
            for h in 0..6 {
                for w in 0..6 {
                    gap.set(0, o, h, w, acc);
                }
            }
        }
        parts.push(gap);

        let mut cat = Tensor::<f64>::zeros(Shape::new(1, 4 * mid, 6, 6));
        for (b, part) in parts.iter().enumerate() {
            for c in 0..mid {
                for h in 0..6 {
                    for w in 0..6 {
                        cat.set(0, b * mid + c, h, w, part.get(0, c, h, w));
                    }
                }
            }
        }
        let fuse_spec = Conv2dSpec::pointwise(4 * mid, cout);
        let fused = conv2d_oracle(&cat, &weight("s.fuse.conv.weight"), &fuse_spec);
        let expected = relu_t(&bn(&fused));

        for (a, e) in graph.value(y).data().iter().zip(expected.data()) {
            assert!((a - e).abs() < 1e-5, "{a} vs {e}");
        }
    }

    // ------------------------------------------------------------------
    // DCN branch
    // ------------------------------------------------------------------

    #[test]
    fn fresh_dcn_branch_is_half_a_regular_convolution() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = seeded_rng(71);
        let branch = DcnBranch::new(&mut store, &mut rng, "d", 3, 4).unwrap();
        let x = rng_tensor::<f64>(&mut rng, Shape::new(2, 3, 5, 5));

        let (graph, y) = run_eval(&store, |f| {
            let xv = f.graph.leaf(x.clone());
            branch.forward(f, xv)
        })
        .unwrap();

        let spec = Conv2dSpec::same(3, 4, 3, 3, 1).with_bias(false);
        let reference = conv2d_oracle(&x, store.value(branch.weight_id()), &spec);
        for (a, r) in graph.value(y).data().iter().zip(reference.data()) {
            assert!((a - 0.5 * r).abs() < 1e-12);
        }
    }

    // ------------------------------------------------------------------
    // MDDC branch
    // ------------------------------------------------------------------

    #[test]
    fn mddc_maps_constant_input_to_zero() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = seeded_rng(73);
        let branch = MddcBranch::new(&mut store, &mut rng, "c", 2, 3).unwrap();
        let x = Tensor::full(Shape::new(1, 2, 6, 6), 3.25);
        let (graph, y) = run_eval(&store, |f| {
            let xv = f.graph.leaf(x);
            branch.forward(f, xv)
        })
        .unwrap();
        // Interior cells cancel exactly; border cells see zero padding, so
        // only check the interior, where every tap lands on the constant.
        let yv = graph.value(y);
        for c in 0..3 {
            for h in 1..5 {
                for w in 1..5 {
                    assert!(yv.get(0, c, h, w).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn mddc_equals_explicit_difference_form_oracle() {
        let cin = 2;
        let cout = 3;
        let mut store = ParamStore::<f64>::new();
        let mut rng = seeded_rng(79);
        let branch = MddcBranch::new(&mut store, &mut rng, "c", cin, cout).unwrap();
        let x = rng_tensor::<f64>(&mut rng, Shape::new(1, cin, 7, 6));

        let (graph, y) = run_eval(&store, |f| {
            let xv = f.graph.leaf(x.clone());
            branch.forward(f, xv)
        })
        .unwrap();

        // Definitional oracle: Σ_p w(p)·(x(p0+p) − x(p0)) per neighborhood,
        // zero-padded reads outside the image.
        let read = |c: usize, h: i32, w: i32| -> f64 {
            if h < 0 || w < 0 || h >= 7 || w >= 6 {
                0.0
            } else {
                x.get(0, c, h as usize, w as usize)
            }
        };
        let mut expected = Tensor::<f64>::zeros(Shape::new(1, cout, 7, 6));
        for (wid, points) in [(branch.hv_id(), HV_POINTS), (branch.dg_id(), DG_POINTS)] {
            let w5 = store.value(wid).clone();
            for o in 0..cout {
                for h in 0..7i32 {
                    for w in 0..6i32 {
                        let mut acc = expected.get(0, o, h as usize, w as usize);
                        for i in 0..cin {
                            let center = read(i, h, w);
                            for (p, &(dy, dx)) in points.iter().enumerate() {
                                acc += w5.get(o, i, 0, p) * (read(i, h + dy, w + dx) - center);
                            }
                        }
                        expected.set(0, o, h as usize, w as usize, acc);
                    }
                }
            }
        }
        // The forms agree everywhere, border included: with zero padding the
        // reparameterized center weight contributes exactly the −x(p0) term
        // the difference form charges for taps that fall outside.
        let yv = graph.value(y);
        for (a, e) in yv.data().iter().zip(expected.data()) {
            assert!((a - e).abs() < 1e-6, "{a} vs {e}");
        }
    }

    #[test]
    fn mddc_impulse_response_is_the_reparameterized_kernel() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = seeded_rng(83);
        let branch = MddcBranch::new(&mut store, &mut rng, "c", 1, 1).unwrap();
        let mut x = Tensor::<f64>::zeros(Shape::new(1, 1, 5, 5));
        x.set(0, 0, 2, 2, 1.0);

        let (graph, y) = run_eval(&store, |f| {
            let xv = f.graph.leaf(x);
            branch.forward(f, xv)
        })
        .unwrap();

        // Correlation with an impulse reads the kernel back flipped.
        let k_hv = reparam_forward(store.value(branch.hv_id()), &HV_POINTS);
        let k_dg = reparam_forward(store.value(branch.dg_id()), &DG_POINTS);
        let yv = graph.value(y);
        for ky in 0..3 {
            for kx in 0..3 {
                let got = yv.get(0, 0, 2 + 1 - ky, 2 + 1 - kx);
                let want = k_hv.get(0, 0, ky, kx) + k_dg.get(0, 0, ky, kx);
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn difference_reparam_gradient_passes_finite_difference_check() {
        let mut rng = seeded_rng(89);
        let w = rng_tensor::<f64>(&mut rng, Shape::new(2, 2, 1, 5));
        let x = rng_tensor::<f64>(&mut rng, Shape::new(1, 2, 4, 4));
        let report = check_gradients(&[w, x], &mut |g: &mut Graph<f64>, vars: &[VarId]| {
            let k = difference_reparam(g, vars[0], HV_POINTS)?;
            let spec = Conv2dSpec::same(2, 2, 3, 3, 1).with_bias(false);
            let y = conv2d(g, vars[1], k, &spec)?;
            sum_all(g, y)
        })
        .unwrap();
        assert!(report.passes(), "{report}");
    }

    // ------------------------------------------------------------------
    // Gate
    // ------------------------------------------------------------------

    #[test]
    fn gate_outputs_probability_vectors_with_shift_invariant_argmax() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = seeded_rng(97);
        let gate = GatedUnit::new(&mut store, &mut rng, "g", 4).unwrap();

        for round in 0..50 {
            let x = rng_tensor::<f64>(&mut rng, Shape::new(2, 4, 3, 3));
            let (graph, w) = run_eval(&store, |f| {
                let xv = f.graph.leaf(x);
                gate.forward(f, xv)
            })
            .unwrap();
            let wv = graph.value(w);
            assert_eq!(wv.shape(), Shape::new(2, 3, 1, 1));
            for n in 0..2 {
                let triple: Vec<f64> = (0..3).map(|c| wv.get(n, c, 0, 0)).collect();
                assert!(triple.iter().all(|v| *v >= 0.0), "round {round}");
                let sum: f64 = triple.iter().sum();
                assert!((sum - 1.0).abs() < 1e-6, "round {round}: sum {sum}");
            }
        }
    }

    #[test]
    fn gate_with_zero_scores_is_uniform_and_bias_shift_changes_nothing() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = seeded_rng(101);
        let gate = GatedUnit::new(&mut store, &mut rng, "g", 2).unwrap();
        // Zero the scoring layer: raw scores are identically zero.
        let wid = store.find("g.fc2.weight").unwrap();
        let shape = store.value(wid).shape();
        store.set_value(wid, Tensor::zeros(shape)).unwrap();

        let x = rng_tensor::<f64>(&mut rng, Shape::new(1, 2, 4, 4));
        let (graph, w) = run_eval(&store, |f| {
            let xv = f.graph.leaf(x.clone());
            gate.forward(f, xv)
        })
        .unwrap();
        for c in 0..3 {
            assert!((graph.value(w).get(0, c, 0, 0) - 1.0 / 3.0).abs() < 1e-12);
        }

        // Adding the same constant to every raw score must not move the
        // output: set the score bias to a uniform 7.
        let bid = store.find("g.fc2.bias").unwrap();
        store
            .set_value(bid, Tensor::full(Shape::new(1, 3, 1, 1), 7.0))
            .unwrap();
        let (graph, w) = run_eval(&store, |f| {
            let xv = f.graph.leaf(x);
            gate.forward(f, xv)
        })
        .unwrap();
        for c in 0..3 {
            assert!((graph.value(w).get(0, c, 0, 0) - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    // ------------------------------------------------------------------
    // Full block
    // ------------------------------------------------------------------

    #[test]
    fn one_hot_pinned_gate_reproduces_the_matching_expert_exactly() {
        let (store, mut block) = build(3, 4, 103);
        let x = rng_tensor::<f64>(&mut seeded_rng(104), Shape::new(2, 3, 6, 6));

        block.pinned_gate = Some([1.0, 0.0, 0.0]);
        let (graph, y) = run_eval(&store, |f| {
            let xv = f.graph.leaf(x.clone());
            block.forward(f, xv)
        })
        .unwrap();
        let (graph_m, m) = run_eval(&store, |f| {
            let xv = f.graph.leaf(x.clone());
            block.msdc.forward(f, xv)
        })
        .unwrap();
        assert_eq!(graph.value(y).data(), graph_m.value(m).data());
    }

    #[test]
    fn forward_is_the_gated_convex_combination_of_expert_outputs() {
        let (store, mut block) = build(2, 4, 107);
        let x = rng_tensor::<f64>(&mut seeded_rng(108), Shape::new(2, 2, 6, 6));

        // Expert outputs via one-hot pins.
        let mut experts = Vec::new();
        for i in 0..3 {
            let mut pin = [0.0; 3];
            pin[i] = 1.0;
            block.pinned_gate = Some(pin);
            let (graph, y) = run_eval(&store, |f| {
                let xv = f.graph.leaf(x.clone());
                block.forward(f, xv)
            })
            .unwrap();
            experts.push(graph.value(y).clone());
        }
        block.pinned_gate = None;

        let (graph, out) = run_eval(&store, |f| {
            let xv = f.graph.leaf(x.clone());
            let w = block.gate_weights(f, xv)?;
            let y = block.forward(f, xv)?;
            Ok((w, y))
        })
        .unwrap();
        let (w, y) = out;
        let wv = graph.value(w);
        let yv = graph.value(y);
        let shape = yv.shape();
        for n in 0..shape.n {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for wd in 0..shape.w {
                        let mixed: f64 = (0..3)
                            .map(|i| wv.get(n, i, 0, 0) * experts[i].get(n, c, h, wd))
                            .sum();
                        assert!((yv.get(n, c, h, wd) - mixed).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn fixed_mix_weights_blend_experts_linearly() {
        let (store, mut block) = build(2, 4, 109);
        let x = rng_tensor::<f64>(&mut seeded_rng(110), Shape::new(1, 2, 4, 4));

        let mut experts = Vec::new();
        for i in 0..3 {
            let mut pin = [0.0; 3];
            pin[i] = 1.0;
            block.pinned_gate = Some(pin);
            let (graph, y) = run_eval(&store, |f| {
                let xv = f.graph.leaf(x.clone());
                block.forward(f, xv)
            })
            .unwrap();
            experts.push(graph.value(y).clone());
        }

        block.pinned_gate = Some([0.5, 0.25, 0.25]);
        let (graph, y) = run_eval(&store, |f| {
            let xv = f.graph.leaf(x.clone());
            block.forward(f, xv)
        })
        .unwrap();
        for (i, v) in graph.value(y).data().iter().enumerate() {
            let want = 0.5 * experts[0].data()[i]
                + 0.25 * experts[1].data()[i]
                + 0.25 * experts[2].data()[i];
            assert!((v - want).abs() < 1e-12);
        }
    }

    #[test]
    fn full_block_gradient_passes_finite_difference_check() {
        let (store, block) = build(2, 4, 113);
        let x = rng_tensor::<f64>(&mut seeded_rng(114), Shape::new(1, 2, 4, 4));

        let report = check_gradients(&[x], &mut |g: &mut Graph<f64>, vars: &[VarId]| {
            let mut f = Fwd::new(g, &store, Mode::Eval);
            let y = block.forward(&mut f, vars[0])?;
            sum_all(g, y)
        })
        .unwrap();
        assert!(report.passes(), "{report}");
    }
}
