//! Finite-difference verification of backward passes.
//!
//! A check takes a set of probe tensors and a builder closure that assembles
//! a scalar-valued subgraph from fresh leaves. The analytic gradient comes
//! from one backward pass; each probed coordinate is then re-evaluated at
//! `x ± h` (central difference, `h = 1e-4·max(1, |x|)`) and compared.
//!
//! Relative error uses `max(|analytic|, |numeric|, 1)` in the denominator so
//! coordinates with near-zero gradients are judged on an absolute scale of
//! the same 1e-4 tolerance instead of amplifying finite-difference noise.
//!
//! A coordinate that misses the tolerance is re-measured at h/10 and h/100
//! and judged on its best agreement: when a rectifier kink or a pooling tie
//! falls inside the probe interval the central difference itself is wrong,
//! and shrinking the step walks the estimate back to the analytic value — a
//! wrong backward instead disagrees at every step size.
//!
//! Checks must run in f64: truncation plus cancellation error in f32 central
//! differences sits right at the tolerance, which would make every check
//! flaky rather than meaningful.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Mode, ParamId, ParamStore, VarId};
use crate::layers::Fwd;
use crate::shape::Shape;
use crate::tensor::Tensor;

/// Builder of the subgraph under test: given a graph and one leaf per probe
/// tensor, return the scalar output variable.
pub type SubgraphFn<'a> = dyn FnMut(&mut Graph<f64>, &[VarId]) -> Result<VarId> + 'a;

/// The coordinate with the largest relative error.
#[derive(Clone, Copy, Debug)]
pub struct WorstCoordinate {
    /// Index of the probe input the coordinate belongs to.
    pub input: usize,
    /// Flat element index within that input.
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst: Option<WorstCoordinate>,
    /// Coordinates actually probed (all of them, or a deterministic sample).
    pub checked: usize,
}

/// Largest relative error a checked coordinate may show and still pass.
pub const TOLERANCE: f64 = 1e-4;

impl GradCheckReport {
    pub fn passes(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "max rel err {:.3e} over {} coords",
            self.max_rel_err, self.checked
        )?;
        if let Some(w) = self.worst {
            write!(
                f,
                " (worst: input {} coord {}, analytic {:.6e}, numeric {:.6e})",
                w.input, w.coord, w.analytic, w.numeric
            )?;
        }
        Ok(())
    }
}

fn scalar_output(g: &Graph<f64>, out: VarId) -> Result<f64> {
    let v = g.value(out);
    if v.shape() != Shape::new(1, 1, 1, 1) {
        return Err(Error::Dimension(format!(
            "gradient check needs a scalar output, got {}",
            v.shape()
        )));
    }
    Ok(v.item())
}

fn evaluate(inputs: &[Tensor<f64>], f: &mut SubgraphFn) -> Result<f64> {
    let mut g = Graph::new();
    let ids: Vec<VarId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &ids)?;
    scalar_output(&g, out)
}

/// Check every coordinate of every probe input.
pub fn check_gradients(inputs: &[Tensor<f64>], f: &mut SubgraphFn) -> Result<GradCheckReport> {
    let all: Vec<Vec<usize>> = inputs.iter().map(|t| (0..t.len()).collect()).collect();
    check_coords(inputs, f, &all)
}

/// Check a deterministic random sample of up to `max_per_input` coordinates
/// per probe input — for subgraphs too large to probe exhaustively.
pub fn check_gradients_sampled(
    inputs: &[Tensor<f64>],
    f: &mut SubgraphFn,
    max_per_input: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let picks: Vec<Vec<usize>> = inputs
        .iter()
        .map(|t| {
            if t.len() <= max_per_input {
                (0..t.len()).collect()
            } else {
                let mut idx = sample(&mut rng, t.len(), max_per_input).into_vec();
                idx.sort_unstable();
                idx
            }
        })
        .collect();
    check_coords(inputs, f, &picks)
}

/// Like [`check_gradients_sampled`], but besides the data `inputs` it probes
/// every trainable parameter registered in `store`: each parameter is routed
/// to a perturbable leaf with [`Graph::bind_param`] before `build` runs, so
/// the layers under test transparently read — and backpropagate into — the
/// probe values. `build` receives leaves for the data inputs only.
pub fn check_gradients_with_params(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    mode: Mode,
    build: &mut dyn FnMut(&mut Fwd<f64>, &[VarId]) -> Result<VarId>,
    max_per_input: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let param_ids: Vec<ParamId> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    let mut probes: Vec<Tensor<f64>> = inputs.to_vec();
    probes.extend(param_ids.iter().map(|&id| store.value(id).clone()));
    let n_data = inputs.len();
    check_gradients_sampled(
        &probes,
        &mut |g, vars| {
            for (k, &id) in param_ids.iter().enumerate() {
                g.bind_param(id, vars[n_data + k]);
            }
            let mut f = Fwd::new(g, store, mode);
            build(&mut f, &vars[..n_data])
        },
        max_per_input,
        seed,
    )
}

fn check_coords(
    inputs: &[Tensor<f64>],
    f: &mut SubgraphFn,
    coords: &[Vec<usize>],
) -> Result<GradCheckReport> {
    // One analytic pass.
    let mut g = Graph::new();
    let ids: Vec<VarId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &ids)?;
    scalar_output(&g, out)?;
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = ids
        .iter()
        .map(|&id| {
            g.grad(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(g.value(id).shape()))
        })
        .collect();
    drop(g);

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, coord_list) in coords.iter().enumerate() {
        for &j in coord_list {
            let base = inputs[i].data()[j];
            let h0 = 1e-4 * base.abs().max(1.0);
            let a = analytic[i].data()[j];
            let mut rel = f64::INFINITY;
            let mut numeric = f64::NAN;
            // Refine only on miss: a kink inside the probe interval corrupts
            // the wide step but not the narrow ones; a wrong analytic
            // gradient misses at all three.
            for shrink in [1.0, 0.1, 0.01] {
                let h = h0 * shrink;
                probe[i].data_mut()[j] = base + h;
                let up = evaluate(&probe, f)?;
                probe[i].data_mut()[j] = base - h;
                let down = evaluate(&probe, f)?;
                let n = (up - down) / (2.0 * h);
                let r = (a - n).abs() / a.abs().max(n.abs()).max(1.0);
                if r < rel {
                    rel = r;
                    numeric = n;
                }
                if rel < TOLERANCE {
                    break;
                }
            }
            probe[i].data_mut()[j] = base;
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some(WorstCoordinate {
                    input: i,
                    coord: j,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}
