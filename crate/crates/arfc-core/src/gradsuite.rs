//! The named finite-difference checks behind the command-line `gradcheck`
//! command and the acceptance gate: every specialized operator, probed in
//! f64 with random cotangents, ending with the fully assembled network.
//!
//! Block entries run through [`check_gradients_with_params`], which routes
//! every trainable parameter to a perturbable probe leaf, so both the data
//! path and the weight path of each backward are exercised. Deformable
//! sampling offsets are pinned to ±(0.3, 0.7) — never within 0.3 of an
//! integer — so no probe step can push a bilinear sampling position across
//! a cell boundary, where the true derivative is one-sided.
//!
//! Biases and normalization shifts are likewise moved off their zero
//! initialization before probing. At zero they are not a generic point: any
//! path that reaches a rectifier as exactly zero (a squeeze descriptor of a
//! strictly high-pass-filtered map, for one) parks the rectifier on its
//! kink, where a central difference and the subgradient convention disagree
//! no matter how small the step.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::Result;
use crate::freq::FrequencyMask;
use crate::gmea::GmeaBlock;
use crate::gradcheck::{check_gradients, check_gradients_with_params, GradCheckReport};
use crate::graph::{Mode, ParamStore};
use crate::hlff::HlffBlock;
use crate::mrffi::{MddcBranch, MrffiConv};
use crate::net::{ArfcNet, NetConfig};
use crate::ops::{conv2d, deform_conv2d, dft2_filter, mul, soft_iou_loss, sum_all, Conv2dSpec};
use crate::shape::Shape;
use crate::tensor::Tensor;
use crate::wfed::WfedBlock;

/// Outcome of one named check.
pub struct SuiteEntry {
    pub name: &'static str,
    pub report: GradCheckReport,
    pub seconds: f64,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.passes()
    }
}

impl std::fmt::Display for SuiteEntry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<14} {}  {}  ({:.2}s)",
            self.name,
            if self.passed() { "pass" } else { "FAIL" },
            self.report,
            self.seconds
        )
    }
}

type EntryFn = fn() -> Result<GradCheckReport>;

const ENTRIES: &[(&str, EntryFn)] = &[
    ("conv2d", entry_conv2d),
    ("dft2_filter", entry_dft2_filter),
    ("deform_conv2d", entry_deform_conv2d),
    ("mddc", entry_mddc),
    ("mrffi_conv", entry_mrffi_conv),
    ("wfed", entry_wfed),
    ("hlff", entry_hlff),
    ("gmea", entry_gmea),
    ("soft_iou_loss", entry_soft_iou_loss),
    ("network", entry_network),
];

/// Run every check in order, timing each.
pub fn run_suite() -> Result<Vec<SuiteEntry>> {
    ENTRIES
        .iter()
        .map(|&(name, f)| {
            let start = Instant::now();
            let report = f()?;
            Ok(SuiteEntry {
                name,
                report,
                seconds: start.elapsed().as_secs_f64(),
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Probe construction
// ---------------------------------------------------------------------------

fn rng_tensor(rng: &mut ChaCha12Rng, shape: Shape) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
}

fn binary_mask(rng: &mut ChaCha12Rng, shape: Shape, density: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| if rng.gen_bool(density) { 1.0 } else { 0.0 })
}

/// A value in ±(0.3, 0.7): at least 0.3 from every integer, so a probe step
/// of ~1e-4 keeps any bilinear sampling position strictly inside its cell.
fn safe_fraction(rng: &mut ChaCha12Rng) -> f64 {
    let mag = rng.gen_range(0.3..0.7);
    if rng.gen_bool(0.5) {
        mag
    } else {
        -mag
    }
}

// ---------------------------------------------------------------------------
// Entries
// ---------------------------------------------------------------------------

fn entry_conv2d() -> Result<GradCheckReport> {
    let mut rng = ChaCha12Rng::seed_from_u64(1001);
    let spec = Conv2dSpec::same(2, 3, 3, 3, 2);
    let x = rng_tensor(&mut rng, Shape::new(1, 2, 6, 6));
    let w = rng_tensor(&mut rng, spec.weight_shape());
    let cot = rng_tensor(&mut rng, Shape::new(1, 3, 6, 6));
    check_gradients(&[x, w], &mut |g, ids| {
        let y = conv2d(g, ids[0], ids[1], &spec)?;
        let c = g.constant(cot.clone());
        let p = mul(g, y, c)?;
        sum_all(g, p)
    })
}

fn entry_dft2_filter() -> Result<GradCheckReport> {
    let mut rng = ChaCha12Rng::seed_from_u64(1002);
    let x = rng_tensor(&mut rng, Shape::new(1, 2, 8, 8));
    let cot = rng_tensor(&mut rng, Shape::new(1, 2, 8, 8));
    let mask = FrequencyMask::<f64>::high_pass(8, 8);
    check_gradients(&[x], &mut |g, ids| {
        let y = dft2_filter(g, ids[0], &mask)?;
        let c = g.constant(cot.clone());
        let p = mul(g, y, c)?;
        sum_all(g, p)
    })
}

fn entry_deform_conv2d() -> Result<GradCheckReport> {
    let mut rng = ChaCha12Rng::seed_from_u64(1003);
    let x = rng_tensor(&mut rng, Shape::new(1, 2, 5, 5));
    let w = rng_tensor(&mut rng, Shape::new(3, 2, 3, 3));
    let offsets = Tensor::from_fn(Shape::new(1, 18, 5, 5), |_, _, _, _| safe_fraction(&mut rng));
    let modulation = Tensor::from_fn(Shape::new(1, 9, 5, 5), |_, _, _, _| rng.gen_range(0.2..0.8));
    let cot = rng_tensor(&mut rng, Shape::new(1, 3, 5, 5));
    check_gradients(&[x, w, offsets, modulation], &mut |g, ids| {
        let y = deform_conv2d(g, ids[0], ids[1], ids[2], ids[3])?;
        let c = g.constant(cot.clone());
        let p = mul(g, y, c)?;
        sum_all(g, p)
    })
}

fn entry_mddc() -> Result<GradCheckReport> {
    let mut rng = ChaCha12Rng::seed_from_u64(1004);
    let mut store = ParamStore::<f64>::new();
    let branch = MddcBranch::new(&mut store, &mut rng, "m", 2, 3)?;
    randomize_biases(&mut store, &mut rng)?;
    let x = rng_tensor(&mut rng, Shape::new(1, 2, 5, 5));
    let cot = rng_tensor(&mut rng, Shape::new(1, 3, 5, 5));
    check_gradients_with_params(
        &store,
        &[x],
        Mode::Eval,
        &mut |f, vars| {
            let y = branch.forward(f, vars[0])?;
            let c = f.graph.constant(cot.clone());
            let p = mul(f.graph, y, c)?;
            sum_all(f.graph, p)
        },
        usize::MAX,
        2004,
    )
}

/// Move every trainable bias and normalization shift to a safe fraction so
/// the probe point is generic: no rectifier pre-activation sits exactly on
/// its kink just because an upstream path is identically zero.
fn randomize_biases(store: &mut ParamStore<f64>, rng: &mut ChaCha12Rng) -> Result<()> {
    let ids: Vec<_> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    for id in ids {
        let name = store.name(id);
        if name.ends_with(".bias") || name.ends_with(".beta") {
            let shape = store.value(id).shape();
            let moved = Tensor::from_fn(shape, |_, _, _, _| safe_fraction(rng));
            store.set_value(id, moved)?;
        }
    }
    Ok(())
}

/// Zero the deformable offset predictor's weights and pin its bias channels
/// to safe fractions: offsets become constant per channel, probe steps move
/// them by at most ~1e-4, and the weight gradients still flow through the
/// bilinear sampler.
fn pin_offset_predictors(store: &mut ParamStore<f64>, rng: &mut ChaCha12Rng) -> Result<()> {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if store.name(id).ends_with(".dcn.offset.bias") {
            let shape = store.value(id).shape();
            let pinned = Tensor::from_fn(shape, |_, _, _, _| safe_fraction(rng));
            store.set_value(id, pinned)?;
        }
    }
    Ok(())
}

fn entry_mrffi_conv() -> Result<GradCheckReport> {
    let mut rng = ChaCha12Rng::seed_from_u64(1005);
    let mut store = ParamStore::<f64>::new();
    let block = MrffiConv::new(&mut store, &mut rng, "m", 2, 4)?;
    randomize_biases(&mut store, &mut rng)?;
    pin_offset_predictors(&mut store, &mut rng)?;
    let x = rng_tensor(&mut rng, Shape::new(1, 2, 4, 4));
    let cot = rng_tensor(&mut rng, Shape::new(1, 4, 4, 4));
    check_gradients_with_params(
        &store,
        &[x],
        Mode::Train,
        &mut |f, vars| {
            let y = block.forward(f, vars[0])?;
            let c = f.graph.constant(cot.clone());
            let p = mul(f.graph, y, c)?;
            sum_all(f.graph, p)
        },
        6,
        2005,
    )
}

fn entry_wfed() -> Result<GradCheckReport> {
    let mut rng = ChaCha12Rng::seed_from_u64(1006);
    let mut store = ParamStore::<f64>::new();
    let block = WfedBlock::new(&mut store, &mut rng, "w", 4)?;
    randomize_biases(&mut store, &mut rng)?;
    let x = rng_tensor(&mut rng, Shape::new(1, 4, 8, 8));
    let cot = rng_tensor(&mut rng, Shape::new(1, 4, 4, 4));
    check_gradients_with_params(
        &store,
        &[x],
        Mode::Train,
        &mut |f, vars| {
            let y = block.forward(f, vars[0])?;
            let c = f.graph.constant(cot.clone());
            let p = mul(f.graph, y, c)?;
            sum_all(f.graph, p)
        },
        6,
        2006,
    )
}

fn entry_hlff() -> Result<GradCheckReport> {
    let mut rng = ChaCha12Rng::seed_from_u64(1007);
    let mut store = ParamStore::<f64>::new();
    let block = HlffBlock::new(&mut store, &mut rng, "f", 4, 8)?;
    randomize_biases(&mut store, &mut rng)?;
    let low = rng_tensor(&mut rng, Shape::new(1, 4, 4, 4));
    let high = rng_tensor(&mut rng, Shape::new(1, 8, 2, 2));
    let cot = rng_tensor(&mut rng, Shape::new(1, 4, 4, 4));
    check_gradients_with_params(
        &store,
        &[low, high],
        Mode::Eval,
        &mut |f, vars| {
            let y = block.forward(f, vars[0], vars[1])?;
            let c = f.graph.constant(cot.clone());
            let p = mul(f.graph, y, c)?;
            sum_all(f.graph, p)
        },
        6,
        2007,
    )
}

fn entry_gmea() -> Result<GradCheckReport> {
    let mut rng = ChaCha12Rng::seed_from_u64(1008);
    let mut store = ParamStore::<f64>::new();
    let block = GmeaBlock::new(&mut store, &mut rng, "a", 4)?;
    randomize_biases(&mut store, &mut rng)?;
    let x = rng_tensor(&mut rng, Shape::new(1, 4, 6, 6));
    let cot = rng_tensor(&mut rng, Shape::new(1, 4, 6, 6));
    check_gradients_with_params(
        &store,
        &[x],
        Mode::Eval,
        &mut |f, vars| {
            let y = block.forward(f, vars[0])?;
            let c = f.graph.constant(cot.clone());
            let p = mul(f.graph, y, c)?;
            sum_all(f.graph, p)
        },
        6,
        2008,
    )
}

fn entry_soft_iou_loss() -> Result<GradCheckReport> {
    let mut rng = ChaCha12Rng::seed_from_u64(1009);
    let logits = rng_tensor(&mut rng, Shape::new(1, 1, 6, 6)).map(|v| 3.0 * v);
    let mask = binary_mask(&mut rng, Shape::new(1, 1, 6, 6), 0.3);
    check_gradients(&[logits], &mut |g, ids| {
        let m = g.constant(mask.clone());
        soft_iou_loss(g, ids[0], m, 1.0)
    })
}

fn entry_network() -> Result<GradCheckReport> {
    let cfg = NetConfig {
        stage_channels: [4, 8, 12, 16, 20],
        seed: 424_242,
        ..NetConfig::default()
    };
    let mut store = ParamStore::<f64>::new();
    let net = ArfcNet::new(&mut store, &cfg)?;
    let mut rng = ChaCha12Rng::seed_from_u64(1010);
    randomize_biases(&mut store, &mut rng)?;
    pin_offset_predictors(&mut store, &mut rng)?;
    let x = rng_tensor(&mut rng, Shape::new(2, 1, 16, 16));
    let mask = binary_mask(&mut rng, Shape::new(2, 1, 16, 16), 0.15);
    check_gradients_with_params(
        &store,
        &[x],
        Mode::Train,
        &mut |f, vars| {
            let logits = net.forward(f, vars[0])?;
            let m = f.graph.constant(mask.clone());
            soft_iou_loss(f.graph, logits, m, 1.0)
        },
        2,
        2010,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_operator_entry_passes() {
        for &(name, f) in ENTRIES {
            if name == "network" {
                continue; // probed by the dedicated test below
            }
            let report = f().unwrap_or_else(|e| panic!("{name}: {e}"));
            assert!(report.passes(), "{name}: {report}");
        }
    }

    #[test]
    fn full_network_gradient_check_passes_at_16x16() {
        let report = entry_network().unwrap();
        assert!(report.passes(), "{report}");
    }
}
