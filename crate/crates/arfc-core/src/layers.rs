//! Parameter-owning layers: building blocks that register their weights in a
//! [`ParamStore`] at construction and bind them into a [`Graph`] per forward
//! pass. Layers hold [`ParamId`]s only, so one layer definition serves any
//! number of forward graphs.

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Mode, ParamId, ParamStore, VarId};
use crate::ops::{
    add_bias, batch_norm, broadcast_spatial, conv2d, global_pool, layer_norm, mul, relu, sigmoid,
    BatchNormRunning, Conv2dSpec, GlobalPoolKind, BN_EPS, LN_EPS,
};
use crate::scalar::Scalar;
use crate::shape::Shape;
use crate::tensor::Tensor;

/// Everything a layer forward needs: the graph under construction, the store
/// its parameter ids resolve against, and the train/eval mode (batch norm
/// switches statistics on it).
pub struct Fwd<'a, S: Scalar> {
    pub graph: &'a mut Graph<S>,
    pub params: &'a ParamStore<S>,
    pub mode: Mode,
}

impl<'a, S: Scalar> Fwd<'a, S> {
    pub fn new(graph: &'a mut Graph<S>, params: &'a ParamStore<S>, mode: Mode) -> Self {
        Fwd { graph, params, mode }
    }

    /// Bind a stored parameter as a graph variable.
    pub fn param(&mut self, id: ParamId) -> VarId {
        self.graph.param(self.params, id)
    }
}

/// Default batch-norm momentum: the running estimate keeps 9/10 of its value
/// per step.
pub const BN_MOMENTUM: f64 = 0.9;

/// Reduction used by the squeeze-excitation and channel-attention bottlenecks.
pub fn reduced_channels(c: usize) -> usize {
    (c / 4).max(1)
}

/// Uniform Kaiming fill over ±√(6 / fan_in).
pub fn kaiming_uniform<S: Scalar>(rng: &mut impl Rng, shape: Shape, fan_in: usize) -> Tensor<S> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = S::from_f64(rng.gen_range(-bound..bound));
    }
    t
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// A convolution with stored weight (and optional bias).
pub struct Conv2dLayer {
    pub spec: Conv2dSpec,
    weight: ParamId,
    bias: Option<ParamId>,
}

impl Conv2dLayer {
    /// Register a Kaiming-initialized convolution under `name`.
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut impl Rng,
        name: &str,
        spec: Conv2dSpec,
    ) -> Result<Self> {
        spec.validate()?;
        let fan_in = (spec.in_channels / spec.groups) * spec.kernel_h * spec.kernel_w;
        let weight = kaiming_uniform(rng, spec.weight_shape(), fan_in);
        Self::with_weight(store, name, spec, weight)
    }

    /// Register an all-zero convolution. Offset and modulation predictors of
    /// the deformable branch start at zero so the branch begins as a plain
    /// convolution.
    pub fn new_zeroed<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        spec: Conv2dSpec,
    ) -> Result<Self> {
        spec.validate()?;
        let weight = Tensor::zeros(spec.weight_shape());
        Self::with_weight(store, name, spec, weight)
    }

    fn with_weight<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        spec: Conv2dSpec,
        weight: Tensor<S>,
    ) -> Result<Self> {
        let weight = store.register(format!("{name}.weight"), weight, true)?;
        let bias = if spec.bias {
            let zeros = Tensor::zeros(Shape::new(1, spec.out_channels, 1, 1));
            Some(store.register(format!("{name}.bias"), zeros, true)?)
        } else {
            None
        };
        Ok(Conv2dLayer { spec, weight, bias })
    }

    pub fn forward<S: Scalar>(&self, f: &mut Fwd<S>, x: VarId) -> Result<VarId> {
        let w = f.param(self.weight);
        let y = conv2d(f.graph, x, w, &self.spec)?;
        match self.bias {
            Some(b) => {
                let b = f.param(b);
                add_bias(f.graph, y, b)
            }
            None => Ok(y),
        }
    }

    pub fn weight_id(&self) -> ParamId {
        self.weight
    }

    pub fn bias_id(&self) -> Option<ParamId> {
        self.bias
    }
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Batch normalization with learnable per-channel affine and stored running
/// statistics. Training forwards queue running-stat updates on the graph; the
/// optimizer step applies them to the store.
pub struct BatchNorm2d {
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, channels: usize) -> Result<Self> {
        let per = Shape::new(1, channels, 1, 1);
        Ok(BatchNorm2d {
            gamma: store.register(format!("{name}.gamma"), Tensor::full(per, S::one()), true)?,
            beta: store.register(format!("{name}.beta"), Tensor::zeros(per), true)?,
            running_mean: store.register(
                format!("{name}.running_mean"),
                Tensor::zeros(per),
                false,
            )?,
            running_var: store.register(
                format!("{name}.running_var"),
                Tensor::full(per, S::one()),
                false,
            )?,
        })
    }

    pub fn forward<S: Scalar>(&self, f: &mut Fwd<S>, x: VarId) -> Result<VarId> {
        let gamma = f.param(self.gamma);
        let beta = f.param(self.beta);
        let running = BatchNormRunning {
            mean: f.params.value(self.running_mean).clone(),
            var: f.params.value(self.running_var).clone(),
            mean_id: Some(self.running_mean),
            var_id: Some(self.running_var),
        };
        batch_norm(
            f.graph,
            x,
            gamma,
            beta,
            &running,
            S::from_f64(BN_MOMENTUM),
            S::from_f64(BN_EPS),
            f.mode,
        )
    }
}

/// Layer normalization over each sample's (C, H, W) block with per-channel
/// affine.
pub struct LayerNorm2d {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm2d {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, channels: usize) -> Result<Self> {
        let per = Shape::new(1, channels, 1, 1);
        Ok(LayerNorm2d {
            gamma: store.register(format!("{name}.gamma"), Tensor::full(per, S::one()), true)?,
            beta: store.register(format!("{name}.beta"), Tensor::zeros(per), true)?,
        })
    }

    pub fn forward<S: Scalar>(&self, f: &mut Fwd<S>, x: VarId) -> Result<VarId> {
        let gamma = f.param(self.gamma);
        let beta = f.param(self.beta);
        layer_norm(f.graph, x, gamma, beta, S::from_f64(LN_EPS))
    }
}

// ---------------------------------------------------------------------------
// Composites
// ---------------------------------------------------------------------------

/// Convolution → batch norm → ReLU. The convolution drops its bias: batch
/// norm's shift makes one redundant.
pub struct ConvBnRelu {
    pub conv: Conv2dLayer,
    pub bn: BatchNorm2d,
}

impl ConvBnRelu {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut impl Rng,
        name: &str,
        spec: Conv2dSpec,
    ) -> Result<Self> {
        let spec = spec.with_bias(false);
        let out_channels = spec.out_channels;
        Ok(ConvBnRelu {
            conv: Conv2dLayer::new(store, rng, &format!("{name}.conv"), spec)?,
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), out_channels)?,
        })
    }

    pub fn forward<S: Scalar>(&self, f: &mut Fwd<S>, x: VarId) -> Result<VarId> {
        let y = self.conv.forward(f, x)?;
        let y = self.bn.forward(f, y)?;
        relu(f.graph, y)
    }
}

/// Two pointwise convolutions with a ReLU bottleneck, applied to pooled
/// (N, C, 1, 1) descriptors. Shared by squeeze-excitation and the channel
/// branch of the attention head.
pub struct ChannelMlp {
    fc1: Conv2dLayer,
    fc2: Conv2dLayer,
}

impl ChannelMlp {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut impl Rng,
        name: &str,
        channels: usize,
    ) -> Result<Self> {
        Self::with_hidden(store, rng, name, channels, reduced_channels(channels))
    }

    /// Same two-layer perceptron with an explicit bottleneck width.
    pub fn with_hidden<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut impl Rng,
        name: &str,
        channels: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(ChannelMlp {
            fc1: Conv2dLayer::new(
                store,
                rng,
                &format!("{name}.fc1"),
                Conv2dSpec::pointwise(channels, hidden),
            )?,
            fc2: Conv2dLayer::new(
                store,
                rng,
                &format!("{name}.fc2"),
                Conv2dSpec::pointwise(hidden, channels),
            )?,
        })
    }

    pub fn forward<S: Scalar>(&self, f: &mut Fwd<S>, x: VarId) -> Result<VarId> {
        let h = self.fc1.forward(f, x)?;
        let h = relu(f.graph, h)?;
        self.fc2.forward(f, h)
    }
}

/// Squeeze-excitation: globally pool each channel, pass the descriptor
/// through a bottleneck MLP, and rescale the input by the sigmoid gate.
pub struct SeBlock {
    mlp: ChannelMlp,
}

impl SeBlock {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut impl Rng,
        name: &str,
        channels: usize,
    ) -> Result<Self> {
        Ok(SeBlock {
            mlp: ChannelMlp::new(store, rng, name, channels)?,
        })
    }

    pub fn forward<S: Scalar>(&self, f: &mut Fwd<S>, x: VarId) -> Result<VarId> {
        let shape = f.graph.value(x).shape();
        let pooled = global_pool(f.graph, x, GlobalPoolKind::Avg)?;
        let gate = self.mlp.forward(f, pooled)?;
        let gate = sigmoid(f.graph, gate)?;
        let gate = broadcast_spatial(f.graph, gate, shape.h, shape.w)?;
        mul(f.graph, x, gate)
    }
}

/// Pixel attention: a pointwise convolution predicts a per-pixel gate in
/// (0, 1) that rescales every input element in place.
pub struct PixelAttention {
    conv: Conv2dLayer,
}

impl PixelAttention {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut impl Rng,
        name: &str,
        channels: usize,
    ) -> Result<Self> {
        Ok(PixelAttention {
            conv: Conv2dLayer::new(store, rng, name, Conv2dSpec::pointwise(channels, channels))?,
        })
    }

    pub fn forward<S: Scalar>(&self, f: &mut Fwd<S>, x: VarId) -> Result<VarId> {
        let gate = self.conv.forward(f, x)?;
        let gate = sigmoid(f.graph, gate)?;
        mul(f.graph, x, gate)
    }
}

/// Run a layer-like forward in a fresh evaluation-mode graph. Convenience
/// for tests and one-off probes.
pub fn run_eval<S: Scalar, T>(
    params: &ParamStore<S>,
    build: impl FnOnce(&mut Fwd<S>) -> Result<T>,
) -> Result<(Graph<S>, T)> {
    let mut graph = Graph::new();
    let mut f = Fwd::new(&mut graph, params, Mode::Eval);
    let out = build(&mut f)?;
    Ok((graph, out))
}
