//! The full segmentation network: a five-stage encoder-decoder over
//! single-channel imagery that emits a per-pixel saliency logit at input
//! resolution.
//!
//! Each encoder stage widens channels with a gated three-expert convolution
//! block and halves resolution with a wavelet downsampler; the decoder
//! climbs back up with grouped skip fusion, another expert block, and a
//! median-augmented attention block per stage, ending in a pointwise head.
//! Every specialized block can be switched off independently, falling back
//! to a plain double convolution, max pooling, bilinear-upsample-and-concat,
//! or identity — with everything off the network is a vanilla U-shaped
//! conv-pool baseline.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::gmea::GmeaBlock;
use crate::graph::{ParamStore, VarId};
use crate::hlff::{upsample_concat, HlffBlock};
use crate::layers::{run_eval, Conv2dLayer, ConvBnRelu, Fwd};
use crate::mrffi::MrffiConv;
use crate::ops::{pool2d, sigmoid, Conv2dSpec, PoolKind};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::wfed::WfedBlock;

/// Number of encoder stages; the last one is the bottleneck and does not
/// downsample, so resolution shrinks by 2⁴ = 16 overall.
pub const STAGES: usize = 5;

/// Architecture description: stage widths plus one switch per specialized
/// block. Disabling a switch swaps in the plain fallback listed on it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetConfig {
    /// Output channels of the five encoder stages, mirrored by the decoder.
    pub stage_channels: [usize; STAGES],
    pub input_channels: usize,
    /// Gated expert convolution blocks; off = double 3×3 conv + BN + ReLU.
    pub use_mrffi: bool,
    /// Wavelet downsampling; off = 2×2 max pooling.
    pub use_wfed: bool,
    /// Grouped skip fusion; off = bilinear upsample + channel concat.
    pub use_hlff: bool,
    /// Median-augmented attention after each decoder block; off = identity.
    pub use_gmea: bool,
    /// Seeds the parameter initialization stream.
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            stage_channels: [8, 16, 32, 64, 128],
            input_channels: 1,
            use_mrffi: true,
            use_wfed: true,
            use_hlff: true,
            use_gmea: true,
            seed: 0,
        }
    }
}

impl NetConfig {
    /// Channel arithmetic every block in the graph relies on, checked up
    /// front so violations are reported with the offending stage named.
    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 {
            return Err(Error::Config("input_channels must be ≥ 1".into()));
        }
        for (i, &c) in self.stage_channels.iter().enumerate() {
            if c == 0 || c % 4 != 0 {
                return Err(Error::Config(format!(
                    "stage {} width {c} is not a positive multiple of 4 \
                     (skip fusion and attention group channels by 4)",
                    i + 1
                )));
            }
        }
        for i in 1..STAGES {
            let (prev, cur) = (self.stage_channels[i - 1], self.stage_channels[i]);
            if cur <= prev {
                return Err(Error::Config(format!(
                    "stage {} width {cur} does not exceed stage {} width {prev}: \
                     stage widths must be strictly increasing",
                    i + 1,
                    i
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Switchable components
// ---------------------------------------------------------------------------

/// Feature block of one stage: the gated expert convolution, or its plain
/// fallback of two 3×3 conv + BN + ReLU units.
enum StageBlock {
    Gated(MrffiConv),
    DoubleConv { conv1: ConvBnRelu, conv2: ConvBnRelu },
}

impl StageBlock {
    fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut impl rand::Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        gated: bool,
    ) -> Result<Self> {
        if gated {
            Ok(StageBlock::Gated(MrffiConv::new(
                store,
                rng,
                name,
                in_channels,
                out_channels,
            )?))
        } else {
            Ok(StageBlock::DoubleConv {
                conv1: ConvBnRelu::new(
                    store,
                    rng,
                    &format!("{name}.conv1"),
                    Conv2dSpec::same(in_channels, out_channels, 3, 3, 1),
                )?,
                conv2: ConvBnRelu::new(
                    store,
                    rng,
                    &format!("{name}.conv2"),
                    Conv2dSpec::same(out_channels, out_channels, 3, 3, 1),
                )?,
            })
        }
    }

    fn forward<S: Scalar>(&self, f: &mut Fwd<S>, x: VarId) -> Result<VarId> {
        match self {
            StageBlock::Gated(block) => block.forward(f, x),
            StageBlock::DoubleConv { conv1, conv2 } => {
                let y = conv1.forward(f, x)?;
                conv2.forward(f, y)
            }
        }
    }
}

/// Resolution halving between encoder stages.
enum Downsample {
    Wavelet(WfedBlock),
    MaxPool,
}

impl Downsample {
    fn forward<S: Scalar>(&self, f: &mut Fwd<S>, x: VarId) -> Result<VarId> {
        match self {
            Downsample::Wavelet(block) => block.forward(f, x),
            Downsample::MaxPool => pool2d(f.graph, x, PoolKind::Max),
        }
    }
}

/// Skip fusion at the top of each decoder stage. Both variants upsample the
/// deep feature themselves, so they take it at its native half resolution.
enum SkipFusion {
    Grouped(HlffBlock),
    PlainConcat,
}

impl SkipFusion {
    fn forward<S: Scalar>(&self, f: &mut Fwd<S>, skip: VarId, deep: VarId) -> Result<VarId> {
        match self {
            SkipFusion::Grouped(block) => block.forward(f, skip, deep),
            SkipFusion::PlainConcat => upsample_concat(f, skip, deep),
        }
    }
}

// ---------------------------------------------------------------------------
// The network
// ---------------------------------------------------------------------------

/// The assembled encoder-decoder. Holds parameter ids only; forwards bind
/// them into a caller-supplied graph, so one network instance serves both
/// training and inference passes.
pub struct ArfcNet {
    cfg: NetConfig,
    enc_blocks: Vec<StageBlock>,
    downs: Vec<Downsample>,
    fuses: Vec<SkipFusion>,
    dec_blocks: Vec<StageBlock>,
    attns: Vec<Option<GmeaBlock>>,
    head: Conv2dLayer,
}

impl ArfcNet {
    /// Register every parameter of the configured architecture in `store`.
    /// Construction order is fixed and the initializer stream is seeded by
    /// `cfg.seed`, so equal configs produce bitwise-equal parameters.
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, cfg: &NetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
        let c = cfg.stage_channels;

        let mut enc_blocks = Vec::with_capacity(STAGES);
        let mut downs = Vec::with_capacity(STAGES - 1);
        let mut in_c = cfg.input_channels;
        for i in 0..STAGES {
            enc_blocks.push(StageBlock::new(
                store,
                &mut rng,
                &format!("enc{}.block", i + 1),
                in_c,
                c[i],
                cfg.use_mrffi,
            )?);
            if i + 1 < STAGES {
                downs.push(if cfg.use_wfed {
                    Downsample::Wavelet(WfedBlock::new(
                        store,
                        &mut rng,
                        &format!("enc{}.down", i + 1),
                        c[i],
                    )?)
                } else {
                    Downsample::MaxPool
                });
            }
            in_c = c[i];
        }

        // Deepest decoder stage first: dec4 lifts the bottleneck onto the
        // stage-4 skip, dec1 ends at input resolution.
        let mut fuses = Vec::with_capacity(STAGES - 1);
        let mut dec_blocks = Vec::with_capacity(STAGES - 1);
        let mut attns = Vec::with_capacity(STAGES - 1);
        for k in (0..STAGES - 1).rev() {
            let (skip_c, deep_c) = (c[k], c[k + 1]);
            let fuse = if cfg.use_hlff {
                SkipFusion::Grouped(HlffBlock::new(
                    store,
                    &mut rng,
                    &format!("dec{}.fuse", k + 1),
                    skip_c,
                    deep_c,
                )?)
            } else {
                SkipFusion::PlainConcat
            };
            // Grouped fusion already projects back to the skip width; the
            // plain path leaves the concatenation for the block to absorb.
            let block_in = match fuse {
                SkipFusion::Grouped(_) => skip_c,
                SkipFusion::PlainConcat => skip_c + deep_c,
            };
            fuses.push(fuse);
            dec_blocks.push(StageBlock::new(
                store,
                &mut rng,
                &format!("dec{}.block", k + 1),
                block_in,
                skip_c,
                cfg.use_mrffi,
            )?);
            attns.push(if cfg.use_gmea {
                Some(GmeaBlock::new(
                    store,
                    &mut rng,
                    &format!("dec{}.gmea", k + 1),
                    skip_c,
                )?)
            } else {
                None
            });
        }
        fuses.reverse();
        dec_blocks.reverse();
        attns.reverse();

        let head = Conv2dLayer::new(store, &mut rng, "head", Conv2dSpec::pointwise(c[0], 1))?;

        Ok(ArfcNet {
            cfg: cfg.clone(),
            enc_blocks,
            downs,
            fuses,
            dec_blocks,
            attns,
            head,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    /// Single-channel logits at input resolution. Spatial dims must be
    /// divisible by 16 (four exact halvings); callers with other sizes
    /// reflect-pad up to the next multiple and crop the output back.
    pub fn forward<S: Scalar>(&self, f: &mut Fwd<S>, x: VarId) -> Result<VarId> {
        let shape = f.graph.value(x).shape();
        if shape.c != self.cfg.input_channels {
            return Err(Error::Dimension(format!(
                "network expects {} input channels, got {}",
                self.cfg.input_channels, shape.c
            )));
        }
        if shape.h % 16 != 0 || shape.w % 16 != 0 {
            return Err(Error::Dimension(format!(
                "input is {}×{} but both spatial dims must be divisible by 16 \
                 (four exact halvings); reflect-pad to the next multiple of 16 \
                 and crop the output back",
                shape.h, shape.w
            )));
        }

        let mut cur = x;
        let mut skips = Vec::with_capacity(STAGES - 1);
        for i in 0..STAGES {
            cur = self.enc_blocks[i].forward(f, cur)?;
            if i + 1 < STAGES {
                skips.push(cur);
                cur = self.downs[i].forward(f, cur)?;
            }
        }
        for k in (0..STAGES - 1).rev() {
            cur = self.fuses[k].forward(f, skips[k], cur)?;
            cur = self.dec_blocks[k].forward(f, cur)?;
            if let Some(attn) = &self.attns[k] {
                cur = attn.forward(f, cur)?;
            }
        }
        self.head.forward(f, cur)
    }
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

/// Saliency map in [0, 1] plus its thresholded binary mask (0/1 values),
/// both at input resolution.
pub struct Inference<S: Scalar> {
    pub saliency: Tensor<S>,
    pub mask: Tensor<S>,
}

/// Binarize a saliency map. Strictly greater-than: a pixel sitting exactly
/// at the threshold stays background.
pub fn threshold_mask<S: Scalar>(saliency: &Tensor<S>, threshold: f64) -> Tensor<S> {
    let t = S::from_f64(threshold);
    saliency.map(|v| if v > t { S::one() } else { S::zero() })
}

/// Run the network on one image (an (N, C, H, W) batch works too) and
/// threshold the sigmoid saliency. Spatial dims must be divisible by 16;
/// for other sizes reflect-pad the image to the next multiple of 16, infer,
/// and crop both outputs back — this op rejects such inputs rather than
/// guessing at a padding policy.
pub fn infer<S: Scalar>(
    net: &ArfcNet,
    params: &ParamStore<S>,
    image: &Tensor<S>,
    threshold: f64,
) -> Result<Inference<S>> {
    let (graph, out) = run_eval(params, |f| {
        let x = f.graph.constant(image.clone());
        let logits = net.forward(f, x)?;
        sigmoid(f.graph, logits)
    })?;
    let saliency = graph.value(out).clone();
    let mask = threshold_mask(&saliency, threshold);
    Ok(Inference { saliency, mask })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shape::Shape;
    use crate::testutil::{rng_tensor, seeded_rng};
    use std::collections::BTreeSet;

    fn tiny_cfg() -> NetConfig {
        NetConfig {
            stage_channels: [4, 8, 12, 16, 20],
            ..NetConfig::default()
        }
    }

    fn param_names(cfg: &NetConfig) -> BTreeSet<String> {
        let mut store = ParamStore::<f32>::new();
        ArfcNet::new(&mut store, cfg).unwrap();
        store.ids().map(|id| store.name(id).to_string()).collect()
    }

    #[test]
    fn config_validation_names_the_offending_stage() {
        let mut cfg = NetConfig::default();
        cfg.stage_channels = [8, 16, 30, 64, 128];
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("stage 3"), "{err}");

        cfg.stage_channels = [8, 16, 32, 64, 64];
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("stage 5"), "{err}");

        cfg.stage_channels = [8, 16, 32, 64, 128];
        cfg.input_channels = 0;
        assert!(cfg.validate().is_err());

        cfg.input_channels = 1;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn forward_rejects_misaligned_inputs() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::<f32>::new();
        let net = ArfcNet::new(&mut store, &cfg).unwrap();

        let reject = |x: Tensor<f32>| match run_eval(&store, |f| {
            let xv = f.graph.constant(x.clone());
            net.forward(f, xv)
        }) {
            Err(e) => e.to_string(),
            Ok(_) => panic!("misaligned input was accepted"),
        };
        let err = reject(Tensor::zeros(Shape::new(1, 1, 24, 32)));
        assert!(err.contains("divisible by 16"), "{err}");
        let err = reject(Tensor::zeros(Shape::new(1, 2, 32, 32)));
        assert!(err.contains("input channels"), "{err}");
    }

    #[test]
    fn every_switch_combination_forwards_at_a_tiny_size() {
        let mut rng = seeded_rng(301);
        let x = rng_tensor::<f32>(&mut rng, Shape::new(1, 1, 16, 16));
        for ablate in ["none", "mrffi", "wfed", "hlff", "gmea", "all"] {
            let mut cfg = tiny_cfg();
            match ablate {
                "mrffi" => cfg.use_mrffi = false,
                "wfed" => cfg.use_wfed = false,
                "hlff" => cfg.use_hlff = false,
                "gmea" => cfg.use_gmea = false,
                "all" => {
                    cfg.use_mrffi = false;
                    cfg.use_wfed = false;
                    cfg.use_hlff = false;
                    cfg.use_gmea = false;
                }
                _ => {}
            }
            let mut store = ParamStore::<f32>::new();
            let net = ArfcNet::new(&mut store, &cfg).unwrap();
            let (graph, y) = run_eval(&store, |f| {
                let xv = f.graph.constant(x.clone());
                net.forward(f, xv)
            })
            .unwrap_or_else(|e| panic!("ablation {ablate}: {e}"));
            assert_eq!(graph.value(y).shape(), Shape::new(1, 1, 16, 16), "{ablate}");
            assert!(graph.value(y).all_finite(), "{ablate}");
        }
    }

    #[test]
    fn same_seed_builds_are_bitwise_identical() {
        let cfg = NetConfig::default();
        let mut a = ParamStore::<f32>::new();
        let mut b = ParamStore::<f32>::new();
        ArfcNet::new(&mut a, &cfg).unwrap();
        ArfcNet::new(&mut b, &cfg).unwrap();

        assert_eq!(a.scalar_count(), b.scalar_count());
        let ids: Vec<_> = a.ids().collect();
        for id in ids {
            assert_eq!(a.name(id), b.name(id));
            assert_eq!(a.value(id).data(), b.value(id).data(), "{}", a.name(id));
        }
        // Recorded size of the default configuration; a drift here means the
        // architecture itself changed.
        assert_eq!(a.scalar_count(), DEFAULT_PARAM_SCALARS);
    }

    /// Total scalars registered by `NetConfig::default()`.
    const DEFAULT_PARAM_SCALARS: usize = 753_458;

    #[test]
    fn disabling_a_switch_changes_only_its_own_parameter_names() {
        let full = param_names(&tiny_cfg());
        let cases: [(&str, fn(&mut NetConfig), fn(&str) -> bool); 4] = [
            ("mrffi", |c| c.use_mrffi = false, |n| n.contains(".block.")),
            ("wfed", |c| c.use_wfed = false, |n| n.contains(".down.")),
            ("hlff", |c| c.use_hlff = false, |n| n.contains(".fuse.")),
            ("gmea", |c| c.use_gmea = false, |n| n.contains(".gmea.")),
        ];
        for (label, toggle, owned) in cases {
            let mut cfg = tiny_cfg();
            toggle(&mut cfg);
            let ablated = param_names(&cfg);
            let diff: Vec<&String> = full.symmetric_difference(&ablated).collect();
            assert!(!diff.is_empty(), "{label}: switch had no effect");
            for name in diff {
                assert!(
                    owned(name),
                    "{label}: parameter {name} changed but belongs to another subgraph"
                );
            }
        }
    }

    #[test]
    fn all_switches_off_is_a_plain_conv_pool_baseline() {
        let mut cfg = tiny_cfg();
        cfg.use_mrffi = false;
        cfg.use_wfed = false;
        cfg.use_hlff = false;
        cfg.use_gmea = false;
        let names = param_names(&cfg);
        // 9 double-conv blocks × 2 units × (conv weight + 4 norm tensors),
        // plus the head's weight and bias.
        assert_eq!(names.len(), 9 * 2 * 5 + 2);
        for name in &names {
            let plain = name.contains(".block.conv1.")
                || name.contains(".block.conv2.")
                || name == "head.weight"
                || name == "head.bias";
            assert!(plain, "unexpected parameter {name} in the baseline");
        }
    }

    #[test]
    fn inference_yields_unit_interval_saliency_and_binary_mask() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::<f32>::new();
        let net = ArfcNet::new(&mut store, &cfg).unwrap();
        let mut rng = seeded_rng(302);
        let image = rng_tensor::<f32>(&mut rng, Shape::new(1, 1, 32, 32)).map(|v| v.abs());

        let out = infer(&net, &store, &image, 0.5).unwrap();
        assert_eq!(out.saliency.shape(), image.shape());
        assert_eq!(out.mask.shape(), image.shape());
        for (&s, &m) in out.saliency.data().iter().zip(out.mask.data()) {
            assert!((0.0..=1.0).contains(&s));
            assert!(m == 0.0 || m == 1.0);
            assert_eq!(m == 1.0, s > 0.5);
        }
    }

    #[test]
    fn mask_threshold_is_strict() {
        let mut t = Tensor::<f64>::zeros(Shape::new(1, 1, 1, 4));
        t.data_mut().copy_from_slice(&[0.4, 0.5, 0.5 + 1e-9, 1.0]);
        let mask = threshold_mask(&t, 0.5);
        assert_eq!(mask.data(), &[0.0, 0.0, 1.0, 1.0]);

        let empty = threshold_mask(&Tensor::<f64>::zeros(Shape::new(1, 1, 2, 2)), 0.5);
        assert!(empty.data().iter().all(|&v| v == 0.0));
    }
}
