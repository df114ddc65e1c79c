//! Reverse-mode automatic differentiation over a dynamically built graph.
//!
//! A `Graph` records one forward pass as an arena of nodes in topological
//! (insertion) order. `backward` sweeps the arena once in reverse, calling
//! each op's adjoint and accumulating cotangents into parent slots. Gradients
//! are retained only for leaves (inputs and parameters); interior cotangents
//! are dropped as soon as every consumer has been processed.
//!
//! Parameters live outside the graph in a `ParamStore` so they persist across
//! steps; `Graph::param` splices a parameter's current value in as a leaf,
//! deduplicated so that a parameter used twice (shared weights) accumulates
//! both contributions into one gradient.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a graph node. Valid only for the graph that produced it.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct VarId(pub(crate) usize);

/// Handle to a persistent parameter in a `ParamStore`.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug)]
pub struct ParamId(pub(crate) usize);

/// Forward-pass mode: training uses batch statistics in normalization layers
/// and queues running-statistic updates; evaluation uses stored statistics.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Mode {
    Train,
    Eval,
}

/// One persistent tensor: a trainable weight or a non-trainable buffer
/// (normalization running statistics).
pub struct ParamEntry<S: Scalar> {
    pub name: String,
    pub value: Tensor<S>,
    pub trainable: bool,
}

/// Ordered collection of named parameters. Registration order is the
/// canonical order for optimizers and checkpoints, which keeps training
/// deterministic.
pub struct ParamStore<S: Scalar> {
    entries: Vec<ParamEntry<S>>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
        }
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        value: Tensor<S>,
        trainable: bool,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        self.entries.push(ParamEntry {
            name,
            value,
            trainable,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    /// Replace a parameter's value; the shape must not change.
    pub fn set_value(&mut self, id: ParamId, value: Tensor<S>) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if entry.value.shape() != value.shape() {
            return Err(Error::shape(
                format!("set_value for `{}`", entry.name),
                entry.value.shape(),
                value.shape(),
            ));
        }
        entry.value = value;
        Ok(())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<S>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Total scalar count over all entries (trainable and buffers).
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Total scalar count over trainable entries only.
    pub fn trainable_scalar_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    /// Convert every entry to another precision (used to run the same
    /// architecture under f64 for gradient verification).
    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    trainable: e.trainable,
                })
                .collect(),
        }
    }
}

/// A differentiable operation: given parent values, the stored output, and the
/// output cotangent, produce cotangents for each parent. `needs[i]` is false
/// when parent `i` does not require a gradient; the op may return `None` for
/// that slot to skip work.
pub(crate) trait Op<S: Scalar> {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        parents: &[Tensor<S>],
        output: &Tensor<S>,
        grad: &Tensor<S>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<S>>>>;
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    parents: Vec<VarId>,
    op: Option<Box<dyn Op<S>>>,
    requires_grad: bool,
    /// Populated by `backward` for leaves only.
    grad: Option<Tensor<S>>,
}

pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    /// Dedup table for parameter leaves: (param, node) pairs.
    param_leaves: Vec<(ParamId, VarId)>,
    /// Running-statistic updates queued by normalization ops during a
    /// training-mode forward; the caller applies them to the store.
    pending_stats: Vec<(ParamId, Tensor<S>)>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            param_leaves: Vec::new(),
            pending_stats: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a leaf that never needs a gradient (input images, masks).
    pub fn constant(&mut self, value: Tensor<S>) -> VarId {
        self.push_leaf(value, false)
    }

    /// Insert a leaf that accumulates a gradient during `backward`.
    pub fn leaf(&mut self, value: Tensor<S>) -> VarId {
        self.push_leaf(value, true)
    }

    /// Splice a parameter in as a leaf. Repeated calls for the same parameter
    /// return the same node so shared weights accumulate one gradient.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> VarId {
        if let Some(&(_, var)) = self.param_leaves.iter().find(|(p, _)| *p == id) {
            return var;
        }
        let var = self.push_leaf(store.value(id).clone(), store.is_trainable(id));
        self.param_leaves.push((id, var));
        var
    }

    /// Route a stored parameter to an existing variable: later [`Graph::param`]
    /// calls for `id` return `var` instead of materializing the stored value.
    /// Gradient probes use this to stand a perturbable leaf in for a parameter;
    /// it must be called before the first `param` lookup binds the real value.
    pub fn bind_param(&mut self, id: ParamId, var: VarId) {
        match self.param_leaves.iter_mut().find(|(p, _)| *p == id) {
            Some(entry) => entry.1 = var,
            None => self.param_leaves.push((id, var)),
        }
    }

    fn push_leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> VarId {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            op: None,
            requires_grad,
            grad: None,
        });
        VarId(self.nodes.len() - 1)
    }

    /// Insert an op node. The output is checked for NaN/Inf: a non-finite
    /// forward value is a hard error, not a warning.
    pub(crate) fn push_op(
        &mut self,
        value: Tensor<S>,
        parents: Vec<VarId>,
        op: Box<dyn Op<S>>,
    ) -> Result<VarId> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents,
            op: Some(op),
            requires_grad,
            grad: None,
        });
        Ok(VarId(self.nodes.len() - 1))
    }

    pub fn value(&self, id: VarId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: VarId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient of the most recent `backward` root with respect to a leaf.
    /// `None` for interior nodes (not retained) and untouched leaves.
    pub fn grad(&self, id: VarId) -> Option<&Tensor<S>> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Gradients for every parameter leaf touched by the last backward pass.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor<S>)> {
        self.param_leaves.iter().filter_map(|&(pid, var)| {
            self.nodes[var.0].grad.as_ref().map(|g| (pid, g))
        })
    }

    pub(crate) fn queue_stat_update(&mut self, id: ParamId, value: Tensor<S>) {
        self.pending_stats.push((id, value));
    }

    /// Drain normalization running-statistic updates queued by the last
    /// training-mode forward pass.
    pub fn take_pending_stats(&mut self) -> Vec<(ParamId, Tensor<S>)> {
        std::mem::take(&mut self.pending_stats)
    }

    /// Reverse sweep from a scalar root, seeding with d(root)/d(root) = 1.
    pub fn backward(&mut self, root: VarId) -> Result<()> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::Dimension(format!(
                "backward root must be scalar, got {}",
                self.nodes[root.0].value.shape()
            )));
        }
        let seed = Tensor::scalar(S::one());
        self.backward_seeded(root, seed)
    }

    /// Reverse sweep from an arbitrary node with an explicit output cotangent
    /// (used by adjoint-consistency tests).
    pub fn backward_seeded(&mut self, root: VarId, seed: Tensor<S>) -> Result<()> {
        seed.require_shape(self.nodes[root.0].value.shape(), "backward seed")?;
        if !self.nodes[root.0].requires_grad {
            return Err(Error::Config(
                "backward from a node with no differentiable ancestors".into(),
            ));
        }

        let mut grads: Vec<Option<Tensor<S>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(seed);

        for i in (0..=root.0).rev() {
            if grads[i].is_none() || !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(op) = self.nodes[i].op.as_ref() else {
                // Leaf: retain the accumulated gradient.
                self.nodes[i].grad = grads[i].take();
                continue;
            };
            let grad_out = grads[i].take().expect("checked above");

            let parent_vals: Vec<Tensor<S>> = self.nodes[i]
                .parents
                .iter()
                .map(|p| self.nodes[p.0].value.clone())
                .collect();
            let needs: Vec<bool> = self.nodes[i]
                .parents
                .iter()
                .map(|p| self.nodes[p.0].requires_grad)
                .collect();

            let parent_grads = op.backward(&parent_vals, &self.nodes[i].value, &grad_out, &needs)?;
            if parent_grads.len() != self.nodes[i].parents.len() {
                return Err(Error::Config(format!(
                    "`{}`.backward returned {} gradients for {} parents",
                    op.name(),
                    parent_grads.len(),
                    self.nodes[i].parents.len()
                )));
            }

            let op_name = op.name();
            let parents = self.nodes[i].parents.clone();
            for (slot, pg) in parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[slot.0].requires_grad {
                    continue;
                }
                if !pg.all_finite() {
                    return Err(Error::NonFinite { op: op_name });
                }
                pg.require_shape(self.nodes[slot.0].value.shape(), op_name)?;
                match &mut grads[slot.0] {
                    Some(acc) => acc.accumulate(&pg)?,
                    empty => *empty = Some(pg),
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;

    #[test]
    fn param_leaves_are_deduplicated() {
        let mut store = ParamStore::<f64>::new();
        let w = store
            .register("w", Tensor::scalar(3.0), true)
            .unwrap();
        let mut g = Graph::new();
        let a = g.param(&store, w);
        let b = g.param(&store, w);
        assert_eq!(a, b);

        // loss = w * w; dloss/dw = 2w = 6, accumulated through one leaf.
        let prod = ops::mul(&mut g, a, b).unwrap();
        let loss = ops::sum_all(&mut g, prod).unwrap();
        g.backward(loss).unwrap();
        let (pid, grad) = g.param_grads().next().unwrap();
        assert_eq!(pid, w);
        assert_eq!(grad.item(), 6.0);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::<f32>::new();
        let big = g.leaf(Tensor::scalar(f32::MAX));
        let err = ops::mul(&mut g, big, big);
        assert!(matches!(err, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn constants_do_not_accumulate_gradients() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(2.0));
        let c = g.constant(Tensor::scalar(5.0));
        let y = ops::mul(&mut g, x, c).unwrap();
        let loss = ops::sum_all(&mut g, y).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 5.0);
        assert!(g.grad(c).is_none());
    }
}
