//! Elementwise and structural ops: add, broadcast multiply, activations,
//! channel concat/slice/permute, spatial broadcast, and full reduction.

use crate::error::{Error, Result};
use crate::graph::{Graph, Op, VarId};
use crate::scalar::Scalar;
use crate::shape::Shape;
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// add

struct AddOp;

impl<S: Scalar> Op<S> for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }

    fn backward(
        &self,
        _parents: &[Tensor<S>],
        _output: &Tensor<S>,
        grad: &Tensor<S>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<S>>>> {
        Ok(vec![
            needs[0].then(|| grad.clone()),
            needs[1].then(|| grad.clone()),
        ])
    }
}

/// Elementwise sum of two same-shape tensors.
pub fn add<S: Scalar>(g: &mut Graph<S>, a: VarId, b: VarId) -> Result<VarId> {
    let (av, bv) = (g.value(a).clone(), g.value(b).clone());
    if av.shape() != bv.shape() {
        return Err(Error::shape("add", av.shape(), bv.shape()));
    }
    let mut out = av.clone();
    {
        let dst = out.data_mut();
        for (d, s) in dst.iter_mut().zip(bv.data()) {
            *d = *d + *s;
        }
    }
    g.push_op(out, vec![a, b], Box::new(AddOp))
}

// ---------------------------------------------------------------------------
// mul (with limited right-hand broadcasting)

/// Broadcast layout of the right operand relative to the left.
#[derive(Clone, Copy, PartialEq, Eq)]
enum MulKind {
    /// Identical shapes.
    Full,
    /// Rhs is (N, C, 1, 1): one gain per sample and channel.
    PerChannel,
    /// Rhs is (N, 1, 1, 1): one gain per sample.
    PerSample,
}

struct MulOp {
    kind: MulKind,
}

fn mul_forward<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, kind: MulKind) -> Tensor<S> {
    let shape = a.shape();
    match kind {
        MulKind::Full => {
            let mut out = a.clone();
            let dst = out.data_mut();
            for (d, s) in dst.iter_mut().zip(b.data()) {
                *d = *d * *s;
            }
            out
        }
        MulKind::PerChannel | MulKind::PerSample => {
            let plane = shape.plane_len();
            let mut out = a.clone();
            let dst = out.data_mut();
            for n in 0..shape.n {
                for c in 0..shape.c {
                    let gain = match kind {
                        MulKind::PerChannel => b.data()[n * shape.c + c],
                        _ => b.data()[n],
                    };
                    let base = shape.row(n, c, 0);
                    for v in &mut dst[base..base + plane] {
                        *v = *v * gain;
                    }
                }
            }
            out
        }
    }
}

impl<S: Scalar> Op<S> for MulOp {
    fn name(&self) -> &'static str {
        "mul"
    }

    fn backward(
        &self,
        parents: &[Tensor<S>],
        _output: &Tensor<S>,
        grad: &Tensor<S>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<S>>>> {
        let (a, b) = (&parents[0], &parents[1]);
        let shape = a.shape();
        let grad_a = needs[0].then(|| mul_forward(grad, b, self.kind));
        let grad_b = if !needs[1] {
            None
        } else {
            Some(match self.kind {
                MulKind::Full => mul_forward(grad, a, MulKind::Full),
                MulKind::PerChannel | MulKind::PerSample => {
                    // Reduce grad ⊙ a over the broadcast axes.
                    let mut out = Tensor::zeros(b.shape());
                    let dst = out.data_mut();
                    let plane = shape.plane_len();
                    for n in 0..shape.n {
                        for c in 0..shape.c {
                            let base = shape.row(n, c, 0);
                            let mut acc = S::zero();
                            for i in base..base + plane {
                                acc = acc + grad.data()[i] * a.data()[i];
                            }
                            let slot = match self.kind {
                                MulKind::PerChannel => n * shape.c + c,
                                _ => n,
                            };
                            dst[slot] = dst[slot] + acc;
                        }
                    }
                    out
                }
            })
        };
        Ok(vec![grad_a, grad_b])
    }
}

/// Elementwise product. `b` may have the same shape as `a`, or be a
/// per-channel gain `(N, C, 1, 1)`, or a per-sample gain `(N, 1, 1, 1)`.
pub fn mul<S: Scalar>(g: &mut Graph<S>, a: VarId, b: VarId) -> Result<VarId> {
    let (av, bv) = (g.value(a).clone(), g.value(b).clone());
    let (sa, sb) = (av.shape(), bv.shape());
    let kind = if sa == sb {
        MulKind::Full
    } else if sb == Shape::new(sa.n, sa.c, 1, 1) {
        MulKind::PerChannel
    } else if sb == Shape::new(sa.n, 1, 1, 1) {
        MulKind::PerSample
    } else {
        return Err(Error::shape("mul", sa, sb));
    };
    let out = mul_forward(&av, &bv, kind);
    g.push_op(out, vec![a, b], Box::new(MulOp { kind }))
}

// ---------------------------------------------------------------------------
// scale by a constant

struct ScaleOp<S: Scalar> {
    factor: S,
}

impl<S: Scalar> Op<S> for ScaleOp<S> {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(
        &self,
        _parents: &[Tensor<S>],
        _output: &Tensor<S>,
        grad: &Tensor<S>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<S>>>> {
        Ok(vec![needs[0].then(|| {
            let f = self.factor;
            grad.map(|v| v * f)
        })])
    }
}

/// Multiply by a compile-time-known constant.
pub fn scale<S: Scalar>(g: &mut Graph<S>, x: VarId, factor: S) -> Result<VarId> {
    let out = g.value(x).map(|v| v * factor);
    g.push_op(out, vec![x], Box::new(ScaleOp { factor }))
}

// ---------------------------------------------------------------------------
// add_bias

struct AddBiasOp;

impl<S: Scalar> Op<S> for AddBiasOp {
    fn name(&self) -> &'static str {
        "add_bias"
    }

    fn backward(
        &self,
        parents: &[Tensor<S>],
        _output: &Tensor<S>,
        grad: &Tensor<S>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<S>>>> {
        let shape = parents[0].shape();
        let grad_x = needs[0].then(|| grad.clone());
        let grad_b = if !needs[1] {
            None
        } else {
            let mut out = Tensor::zeros(parents[1].shape());
            let dst = out.data_mut();
            let plane = shape.plane_len();
            for n in 0..shape.n {
                for c in 0..shape.c {
                    let base = shape.row(n, c, 0);
                    let mut acc = S::zero();
                    for i in base..base + plane {
                        acc = acc + grad.data()[i];
                    }
                    dst[c] = dst[c] + acc;
                }
            }
            Some(out)
        };
        Ok(vec![grad_x, grad_b])
    }
}

/// Add a per-channel bias of shape (1, C, 1, 1).
pub fn add_bias<S: Scalar>(g: &mut Graph<S>, x: VarId, bias: VarId) -> Result<VarId> {
    let (xv, bv) = (g.value(x).clone(), g.value(bias).clone());
    let shape = xv.shape();
    bv.require_shape(Shape::new(1, shape.c, 1, 1), "add_bias")?;
    let mut out = xv.clone();
    {
        let dst = out.data_mut();
        let plane = shape.plane_len();
        for n in 0..shape.n {
            for c in 0..shape.c {
                let b = bv.data()[c];
                let base = shape.row(n, c, 0);
                for v in &mut dst[base..base + plane] {
                    *v = *v + b;
                }
            }
        }
    }
    g.push_op(out, vec![x, bias], Box::new(AddBiasOp))
}

// ---------------------------------------------------------------------------
// relu

struct ReluOp;

impl<S: Scalar> Op<S> for ReluOp {
    fn name(&self) -> &'static str {
        "relu"
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
        let mut out = grad.clone();
        let dst = out.data_mut();
        for (d, &x) in dst.iter_mut().zip(parents[0].data()) {
            if x <= S::zero() {
                *d = S::zero();
            }
        }
        Ok(vec![Some(out)])
    }
}

pub fn relu<S: Scalar>(g: &mut Graph<S>, x: VarId) -> Result<VarId> {
    let out = g.value(x).map(|v| v.max(S::zero()));
    g.push_op(out, vec![x], Box::new(ReluOp))
}

// ---------------------------------------------------------------------------
// sigmoid

/// Numerically stable logistic: never exponentiates a positive argument, so
/// extreme logits saturate cleanly to exactly 0 or 1 instead of overflowing.
pub(crate) fn sigmoid_scalar<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

struct SigmoidOp;

impl<S: Scalar> Op<S> for SigmoidOp {
    fn name(&self) -> &'static str {
        "sigmoid"
    }

    fn backward(
        &self,
        _parents: &[Tensor<S>],
        output: &Tensor<S>,
        grad: &Tensor<S>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<S>>>> {
        if !needs[0] {
            return Ok(vec![None]);
        }
        let mut out = grad.clone();
        let dst = out.data_mut();
        for (d, &y) in dst.iter_mut().zip(output.data()) {
            *d = *d * y * (S::one() - y);
        }
        Ok(vec![Some(out)])
    }
}

pub fn sigmoid<S: Scalar>(g: &mut Graph<S>, x: VarId) -> Result<VarId> {
    let out = g.value(x).map(sigmoid_scalar);
    g.push_op(out, vec![x], Box::new(SigmoidOp))
}

// ---------------------------------------------------------------------------
// softmax over the channel axis

struct SoftmaxChannelsOp;

impl<S: Scalar> Op<S> for SoftmaxChannelsOp {
    fn name(&self) -> &'static str {
        "softmax_channels"
    }

    fn backward(
        &self,
        parents: &[Tensor<S>],
        output: &Tensor<S>,
        grad: &Tensor<S>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<S>>>> {
        if !needs[0] {
            return Ok(vec![None]);
        }
        let shape = parents[0].shape();
        let mut out = Tensor::zeros(shape);
        let dst = out.data_mut();
        let plane = shape.plane_len();
        for n in 0..shape.n {
            for h in 0..shape.h {
                for w in 0..shape.w {
                    let pos = (n * shape.c * plane) + h * shape.w + w;
                    // dot = Σ_c grad·y along the channel axis at this position
                    let mut dot = S::zero();
                    for c in 0..shape.c {
                        let i = pos + c * plane;
                        dot = dot + grad.data()[i] * output.data()[i];
                    }
                    for c in 0..shape.c {
                        let i = pos + c * plane;
                        dst[i] = output.data()[i] * (grad.data()[i] - dot);
                    }
                }
            }
        }
        Ok(vec![Some(out)])
    }
}

/// Softmax along the channel axis, independently at each (n, h, w) position.
/// Shifts by the per-position max for stability.
pub fn softmax_channels<S: Scalar>(g: &mut Graph<S>, x: VarId) -> Result<VarId> {
    let xv = g.value(x).clone();
    let shape = xv.shape();
    let plane = shape.plane_len();
    let mut out = Tensor::zeros(shape);
    {
        let dst = out.data_mut();
        for n in 0..shape.n {
            for h in 0..shape.h {
                for w in 0..shape.w {
                    let pos = (n * shape.c * plane) + h * shape.w + w;
                    let mut m = S::neg_infinity();
                    for c in 0..shape.c {
                        m = m.max(xv.data()[pos + c * plane]);
                    }
                    let mut z = S::zero();
                    for c in 0..shape.c {
                        let e = (xv.data()[pos + c * plane] - m).exp();
                        dst[pos + c * plane] = e;
                        z = z + e;
                    }
                    for c in 0..shape.c {
                        dst[pos + c * plane] = dst[pos + c * plane] / z;
                    }
                }
            }
        }
    }
    g.push_op(out, vec![x], Box::new(SoftmaxChannelsOp))
}

// ---------------------------------------------------------------------------
// concat / slice / permute along channels

struct ConcatChannelsOp {
    channels: Vec<usize>,
}

impl<S: Scalar> Op<S> for ConcatChannelsOp {
    fn name(&self) -> &'static str {
        "concat_channels"
    }

    fn backward(
        &self,
        parents: &[Tensor<S>],
        _output: &Tensor<S>,
        grad: &Tensor<S>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<S>>>> {
        let gshape = grad.shape();
        let plane = gshape.plane_len();
        let mut outs = Vec::with_capacity(parents.len());
        let mut offset = 0usize;
        for (idx, &ch) in self.channels.iter().enumerate() {
            if !needs[idx] {
                outs.push(None);
                offset += ch;
                continue;
            }
            let shape = parents[idx].shape();
            let mut out = Tensor::zeros(shape);
            {
                let dst = out.data_mut();
                for n in 0..gshape.n {
                    let src_base = gshape.row(n, offset, 0);
                    let dst_base = shape.row(n, 0, 0);
                    let count = ch * plane;
                    dst[dst_base..dst_base + count]
                        .copy_from_slice(&grad.data()[src_base..src_base + count]);
                }
            }
            outs.push(Some(out));
            offset += ch;
        }
        Ok(outs)
    }
}

/// Concatenate along the channel axis. All inputs share (N, H, W).
pub fn concat_channels<S: Scalar>(g: &mut Graph<S>, inputs: &[VarId]) -> Result<VarId> {
    if inputs.is_empty() {
        return Err(Error::Config("concat_channels of zero inputs".into()));
    }
    let first = g.value(inputs[0]).shape();
    let mut channels = Vec::with_capacity(inputs.len());
    let mut total_c = 0usize;
    for &id in inputs {
        let s = g.value(id).shape();
        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
            return Err(Error::shape("concat_channels", first, s));
        }
        channels.push(s.c);
        total_c += s.c;
    }
    let out_shape = Shape::new(first.n, total_c, first.h, first.w);
    let plane = first.plane_len();
    let mut out = Tensor::zeros(out_shape);
    {
        let dst = out.data_mut();
        for n in 0..first.n {
            let mut coff = 0usize;
            for &id in inputs {
                let t = g.value(id);
                let ch = t.shape().c;
                let src_base = t.shape().row(n, 0, 0);
                let dst_base = out_shape.row(n, coff, 0);
                let count = ch * plane;
                dst[dst_base..dst_base + count]
                    .copy_from_slice(&t.data()[src_base..src_base + count]);
                coff += ch;
            }
        }
    }
    g.push_op(out, inputs.to_vec(), Box::new(ConcatChannelsOp { channels }))
}

struct SliceChannelsOp {
    start: usize,
    len: usize,
}

impl<S: Scalar> Op<S> for SliceChannelsOp {
    fn name(&self) -> &'static str {
        "slice_channels"
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
        let shape = parents[0].shape();
        let gshape = grad.shape();
        let plane = shape.plane_len();
        let mut out = Tensor::zeros(shape);
        {
            let dst = out.data_mut();
            for n in 0..shape.n {
                let dst_base = shape.row(n, self.start, 0);
                let src_base = gshape.row(n, 0, 0);
                let count = self.len * plane;
                dst[dst_base..dst_base + count]
                    .copy_from_slice(&grad.data()[src_base..src_base + count]);
            }
        }
        Ok(vec![Some(out)])
    }
}

/// Take channels `start .. start + len`.
pub fn slice_channels<S: Scalar>(
    g: &mut Graph<S>,
    x: VarId,
    start: usize,
    len: usize,
) -> Result<VarId> {
    let xv = g.value(x).clone();
    let shape = xv.shape();
    if start + len > shape.c || len == 0 {
        return Err(Error::Dimension(format!(
            "slice_channels {start}..{} of {} channels",
            start + len,
            shape.c
        )));
    }
    let out_shape = Shape::new(shape.n, len, shape.h, shape.w);
    let plane = shape.plane_len();
    let mut out = Tensor::zeros(out_shape);
    {
        let dst = out.data_mut();
        for n in 0..shape.n {
            let src_base = shape.row(n, start, 0);
            let dst_base = out_shape.row(n, 0, 0);
            let count = len * plane;
            dst[dst_base..dst_base + count]
                .copy_from_slice(&xv.data()[src_base..src_base + count]);
        }
    }
    g.push_op(out, vec![x], Box::new(SliceChannelsOp { start, len }))
}

struct PermuteChannelsOp {
    perm: Vec<usize>,
}

impl<S: Scalar> Op<S> for PermuteChannelsOp {
    fn name(&self) -> &'static str {
        "permute_channels"
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
        // y[:, i] = x[:, perm[i]]  ⇒  gx[:, perm[i]] = gy[:, i]
        let shape = parents[0].shape();
        let plane = shape.plane_len();
        let mut out = Tensor::zeros(shape);
        {
            let dst = out.data_mut();
            for n in 0..shape.n {
                for (i, &src_c) in self.perm.iter().enumerate() {
                    let dst_base = shape.row(n, src_c, 0);
                    let src_base = shape.row(n, i, 0);
                    dst[dst_base..dst_base + plane]
                        .copy_from_slice(&grad.data()[src_base..src_base + plane]);
                }
            }
        }
        Ok(vec![Some(out)])
    }
}

/// Reorder channels: output channel `i` reads input channel `perm[i]`.
/// `perm` must be a permutation of `0..C`.
pub fn permute_channels<S: Scalar>(g: &mut Graph<S>, x: VarId, perm: Vec<usize>) -> Result<VarId> {
    let xv = g.value(x).clone();
    let shape = xv.shape();
    let mut seen = vec![false; shape.c];
    if perm.len() != shape.c {
        return Err(Error::Config(format!(
            "permutation length {} != {} channels",
            perm.len(),
            shape.c
        )));
    }
    for &p in &perm {
        if p >= shape.c || seen[p] {
            return Err(Error::Config("invalid channel permutation".into()));
        }
        seen[p] = true;
    }
    let plane = shape.plane_len();
    let mut out = Tensor::zeros(shape);
    {
        let dst = out.data_mut();
        for n in 0..shape.n {
            for (i, &src_c) in perm.iter().enumerate() {
                let src_base = shape.row(n, src_c, 0);
                let dst_base = shape.row(n, i, 0);
                dst[dst_base..dst_base + plane]
                    .copy_from_slice(&xv.data()[src_base..src_base + plane]);
            }
        }
    }
    g.push_op(out, vec![x], Box::new(PermuteChannelsOp { perm }))
}

// ---------------------------------------------------------------------------
// broadcast_spatial

struct BroadcastSpatialOp;

impl<S: Scalar> Op<S> for BroadcastSpatialOp {
    fn name(&self) -> &'static str {
        "broadcast_spatial"
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
        let shape = grad.shape();
        let plane = shape.plane_len();
        let mut out = Tensor::zeros(parents[0].shape());
        {
            let dst = out.data_mut();
            for n in 0..shape.n {
                for c in 0..shape.c {
                    let base = shape.row(n, c, 0);
                    let mut acc = S::zero();
                    for i in base..base + plane {
                        acc = acc + grad.data()[i];
                    }
                    dst[n * shape.c + c] = acc;
                }
            }
        }
        Ok(vec![Some(out)])
    }
}

/// Replicate a (N, C, 1, 1) tensor over an (H, W) spatial extent.
pub fn broadcast_spatial<S: Scalar>(
    g: &mut Graph<S>,
    x: VarId,
    h: usize,
    w: usize,
) -> Result<VarId> {
    let xv = g.value(x).clone();
    let s = xv.shape();
    xv.require_shape(Shape::new(s.n, s.c, 1, 1), "broadcast_spatial input")?;
    let out_shape = Shape::new(s.n, s.c, h, w);
    let mut out = Tensor::zeros(out_shape);
    {
        let dst = out.data_mut();
        let plane = h * w;
        for n in 0..s.n {
            for c in 0..s.c {
                let v = xv.data()[n * s.c + c];
                let base = out_shape.row(n, c, 0);
                for d in &mut dst[base..base + plane] {
                    *d = v;
                }
            }
        }
    }
    g.push_op(out, vec![x], Box::new(BroadcastSpatialOp))
}

// ---------------------------------------------------------------------------
// broadcast_channels

struct BroadcastChannelsOp;

impl<S: Scalar> Op<S> for BroadcastChannelsOp {
    fn name(&self) -> &'static str {
        "broadcast_channels"
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
        let mut gx = Tensor::zeros(xs);
        {
            let dst = gx.data_mut();
            let src = grad.data();
            let plane = gs.plane_len();
            for n in 0..gs.n {
                let base = xs.row(n, 0, 0);
                for c in 0..gs.c {
                    let row = gs.row(n, c, 0);
                    for (d, s) in dst[base..base + plane].iter_mut().zip(&src[row..row + plane])
                    {
                        *d = *d + *s;
                    }
                }
            }
        }
        Ok(vec![Some(gx)])
    }
}

/// Replicate a single-channel tensor across `c` channels; the adjoint sums
/// them back.
pub fn broadcast_channels<S: Scalar>(g: &mut Graph<S>, x: VarId, c: usize) -> Result<VarId> {
    let xv = g.value(x).clone();
    let s = xv.shape();
    xv.require_shape(Shape::new(s.n, 1, s.h, s.w), "broadcast_channels input")?;
    let out_shape = Shape::new(s.n, c, s.h, s.w);
    let mut out = Tensor::zeros(out_shape);
    {
        let dst = out.data_mut();
        let plane = s.plane_len();
        for n in 0..s.n {
            let src_row = s.row(n, 0, 0);
            for ch in 0..c {
                let base = out_shape.row(n, ch, 0);
                dst[base..base + plane].copy_from_slice(&xv.data()[src_row..src_row + plane]);
            }
        }
    }
    g.push_op(out, vec![x], Box::new(BroadcastChannelsOp))
}

// ---------------------------------------------------------------------------
// sum_all

struct SumAllOp;

impl<S: Scalar> Op<S> for SumAllOp {
    fn name(&self) -> &'static str {
        "sum_all"
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
        Ok(vec![Some(Tensor::full(parents[0].shape(), grad.item()))])
    }
}

/// Sum every element into a 1x1x1x1 scalar.
pub fn sum_all<S: Scalar>(g: &mut Graph<S>, x: VarId) -> Result<VarId> {
    let mut acc = S::zero();
    for &v in g.value(x).data() {
        acc = acc + v;
    }
    g.push_op(Tensor::scalar(acc), vec![x], Box::new(SumAllOp))
}
