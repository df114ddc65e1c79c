//! Normalization layers.
//!
//! `batch_norm` normalizes each channel over (N, H, W); training mode uses
//! batch statistics and queues running-statistic updates on the graph,
//! evaluation mode applies the stored running statistics as a per-channel
//! affine map. `layer_norm` normalizes each sample over (C, H, W) with
//! per-channel affine parameters.

use crate::error::{Error, Result};
use crate::graph::{Graph, Mode, Op, ParamId, VarId};
use crate::scalar::Scalar;
use crate::shape::Shape;
use crate::tensor::Tensor;

/// Variance-floor epsilon shared by both normalizers.
pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-5;

/// Running statistics carried by a batch-norm layer. The optional ids let a
/// training-mode forward queue its momentum updates; verification harnesses
/// pass `None` and discard them.
pub struct BatchNormRunning<S: Scalar> {
    pub mean: Tensor<S>,
    pub var: Tensor<S>,
    pub mean_id: Option<ParamId>,
    pub var_id: Option<ParamId>,
}

struct BatchNormOp<S: Scalar> {
    /// Statistics actually used for normalization (batch stats in training,
    /// running stats in evaluation), one per channel.
    mean: Vec<S>,
    var: Vec<S>,
    eps: S,
    mode: Mode,
}

fn per_channel_shape(c: usize) -> Shape {
    Shape::new(1, c, 1, 1)
}

impl<S: Scalar> Op<S> for BatchNormOp<S> {
    fn name(&self) -> &'static str {
        "batch_norm"
    }

    fn backward(
        &self,
        parents: &[Tensor<S>],
        _output: &Tensor<S>,
        grad: &Tensor<S>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<S>>>> {
        let (x, gamma) = (&parents[0], &parents[1]);
        let xs = x.shape();
        let plane = xs.plane_len();
        let m = S::from_f64((xs.n * plane) as f64);

        let mut gx = needs[0].then(|| Tensor::zeros(xs));
        let mut ggamma = needs[1].then(|| Tensor::zeros(per_channel_shape(xs.c)));
        let mut gbeta = needs[2].then(|| Tensor::zeros(per_channel_shape(xs.c)));

        for c in 0..xs.c {
            let mu = self.mean[c];
            let s = (self.var[c] + self.eps).sqrt();
            let gam = gamma.data()[c];

            // Channel reductions over (N, H, W), fixed order.
            let mut sum_gy = S::zero();
            let mut sum_gy_xhat = S::zero();
            for n in 0..xs.n {
                let base = xs.row(n, c, 0);
                for i in base..base + plane {
                    let gy = grad.data()[i];
                    let xhat = (x.data()[i] - mu) / s;
                    sum_gy = sum_gy + gy;
                    sum_gy_xhat = sum_gy_xhat + gy * xhat;
                }
            }

            if let Some(gb) = gbeta.as_mut() {
                gb.data_mut()[c] = sum_gy;
            }
            if let Some(gg) = ggamma.as_mut() {
                gg.data_mut()[c] = sum_gy_xhat;
            }
            if let Some(gxt) = gx.as_mut() {
                let dst = gxt.data_mut();
                match self.mode {
                    Mode::Train => {
                        let mean_gy = sum_gy / m;
                        let mean_gy_xhat = sum_gy_xhat / m;
                        for n in 0..xs.n {
                            let base = xs.row(n, c, 0);
                            for i in base..base + plane {
                                let xhat = (x.data()[i] - mu) / s;
                                dst[i] = gam / s
                                    * (grad.data()[i] - mean_gy - xhat * mean_gy_xhat);
                            }
                        }
                    }
                    Mode::Eval => {
                        // Running stats are constants: the map is affine.
                        let k = gam / s;
                        for n in 0..xs.n {
                            let base = xs.row(n, c, 0);
                            for i in base..base + plane {
                                dst[i] = grad.data()[i] * k;
                            }
                        }
                    }
                }
            }
        }
        Ok(vec![gx, ggamma, gbeta])
    }
}

/// Batch normalization. `momentum` follows the convention
/// `running ← momentum·running + (1 − momentum)·batch`, with the unbiased
/// batch variance entering the running estimate.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm<S: Scalar>(
    g: &mut Graph<S>,
    x: VarId,
    gamma: VarId,
    beta: VarId,
    running: &BatchNormRunning<S>,
    momentum: S,
    eps: S,
    mode: Mode,
) -> Result<VarId> {
    let xv = g.value(x).clone();
    let xs = xv.shape();
    let plane = xs.plane_len();
    let m = xs.n * plane;
    g.value(gamma)
        .require_shape(per_channel_shape(xs.c), "batch_norm gamma")?;
    g.value(beta)
        .require_shape(per_channel_shape(xs.c), "batch_norm beta")?;
    running
        .mean
        .require_shape(per_channel_shape(xs.c), "batch_norm running mean")?;
    running
        .var
        .require_shape(per_channel_shape(xs.c), "batch_norm running var")?;

    let (mean, var) = match mode {
        Mode::Train => {
            if m < 2 {
                return Err(Error::Dimension(format!(
                    "batch_norm training mode needs N·H·W >= 2 per channel, got {m}"
                )));
            }
            let mut mean = vec![S::zero(); xs.c];
            let mut var = vec![S::zero(); xs.c];
            let mf = S::from_f64(m as f64);
            for c in 0..xs.c {
                let mut sum = S::zero();
                for n in 0..xs.n {
                    let base = xs.row(n, c, 0);
                    for i in base..base + plane {
                        sum = sum + xv.data()[i];
                    }
                }
                let mu = sum / mf;
                let mut ss = S::zero();
                for n in 0..xs.n {
                    let base = xs.row(n, c, 0);
                    for i in base..base + plane {
                        let d = xv.data()[i] - mu;
                        ss = ss + d * d;
                    }
                }
                mean[c] = mu;
                var[c] = ss / mf;
            }

            // Queue running-statistic momentum updates for the caller.
            if running.mean_id.is_some() || running.var_id.is_some() {
                let keep = momentum;
                let take = S::one() - momentum;
                let unbias = S::from_f64(m as f64 / (m as f64 - 1.0));
                if let Some(id) = running.mean_id {
                    let mut new_mean = running.mean.clone();
                    for (c, slot) in new_mean.data_mut().iter_mut().enumerate() {
                        *slot = keep * *slot + take * mean[c];
                    }
                    g.queue_stat_update(id, new_mean);
                }
                if let Some(id) = running.var_id {
                    let mut new_var = running.var.clone();
                    for (c, slot) in new_var.data_mut().iter_mut().enumerate() {
                        *slot = keep * *slot + take * var[c] * unbias;
                    }
                    g.queue_stat_update(id, new_var);
                }
            }
            (mean, var)
        }
        Mode::Eval => (
            running.mean.data().to_vec(),
            running.var.data().to_vec(),
        ),
    };

    let gam = g.value(gamma).clone();
    let bet = g.value(beta).clone();
    let mut out = Tensor::zeros(xs);
    {
        let dst = out.data_mut();
        for c in 0..xs.c {
            let s = (var[c] + eps).sqrt();
            let k = gam.data()[c] / s;
            let b = bet.data()[c] - mean[c] * k;
            for n in 0..xs.n {
                let base = xs.row(n, c, 0);
                for i in base..base + plane {
                    dst[i] = xv.data()[i] * k + b;
                }
            }
        }
    }
    g.push_op(
        out,
        vec![x, gamma, beta],
        Box::new(BatchNormOp { mean, var, eps, mode }),
    )
}

// ---------------------------------------------------------------------------
// layer_norm

struct LayerNormOp<S: Scalar> {
    mean: Vec<S>, // per sample
    var: Vec<S>,  // per sample, biased
    eps: S,
}

impl<S: Scalar> Op<S> for LayerNormOp<S> {
    fn name(&self) -> &'static str {
        "layer_norm"
    }

    fn backward(
        &self,
        parents: &[Tensor<S>],
        _output: &Tensor<S>,
        grad: &Tensor<S>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<S>>>> {
        let (x, gamma) = (&parents[0], &parents[1]);
        let xs = x.shape();
        let sample = xs.sample_len();
        let plane = xs.plane_len();
        let mf = S::from_f64(sample as f64);

        let mut gx = needs[0].then(|| Tensor::zeros(xs));
        let mut ggamma = needs[1].then(|| Tensor::zeros(per_channel_shape(xs.c)));
        let mut gbeta = needs[2].then(|| Tensor::zeros(per_channel_shape(xs.c)));

        for n in 0..xs.n {
            let mu = self.mean[n];
            let s = (self.var[n] + self.eps).sqrt();
            let base = xs.row(n, 0, 0);

            let mut sum_dxhat = S::zero();
            let mut sum_dxhat_xhat = S::zero();
            for c in 0..xs.c {
                let gam = gamma.data()[c];
                for i in base + c * plane..base + (c + 1) * plane {
                    let dxhat = grad.data()[i] * gam;
                    let xhat = (x.data()[i] - mu) / s;
                    sum_dxhat = sum_dxhat + dxhat;
                    sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                }
            }
            let mean_dxhat = sum_dxhat / mf;
            let mean_dxhat_xhat = sum_dxhat_xhat / mf;

            for c in 0..xs.c {
                let gam = gamma.data()[c];
                let mut acc_g = S::zero();
                let mut acc_b = S::zero();
                for i in base + c * plane..base + (c + 1) * plane {
                    let gy = grad.data()[i];
                    let xhat = (x.data()[i] - mu) / s;
                    acc_g = acc_g + gy * xhat;
                    acc_b = acc_b + gy;
                    if let Some(gxt) = gx.as_mut() {
                        gxt.data_mut()[i] =
                            (gy * gam - mean_dxhat - xhat * mean_dxhat_xhat) / s;
                    }
                }
                if let Some(gg) = ggamma.as_mut() {
                    let d = gg.data_mut();
                    d[c] = d[c] + acc_g;
                }
                if let Some(gb) = gbeta.as_mut() {
                    let d = gb.data_mut();
                    d[c] = d[c] + acc_b;
                }
            }
        }
        Ok(vec![gx, ggamma, gbeta])
    }
}

/// Layer normalization over (C, H, W) per sample, with per-channel affine.
pub fn layer_norm<S: Scalar>(
    g: &mut Graph<S>,
    x: VarId,
    gamma: VarId,
    beta: VarId,
    eps: S,
) -> Result<VarId> {
    let xv = g.value(x).clone();
    let xs = xv.shape();
    let sample = xs.sample_len();
    if sample < 2 {
        return Err(Error::Dimension(
            "layer_norm needs at least 2 elements per sample".into(),
        ));
    }
    g.value(gamma)
        .require_shape(per_channel_shape(xs.c), "layer_norm gamma")?;
    g.value(beta)
        .require_shape(per_channel_shape(xs.c), "layer_norm beta")?;

    let mf = S::from_f64(sample as f64);
    let mut mean = vec![S::zero(); xs.n];
    let mut var = vec![S::zero(); xs.n];
    for n in 0..xs.n {
        let base = xs.row(n, 0, 0);
        let mut sum = S::zero();
        for i in base..base + sample {
            sum = sum + xv.data()[i];
        }
        let mu = sum / mf;
        let mut ss = S::zero();
        for i in base..base + sample {
            let d = xv.data()[i] - mu;
            ss = ss + d * d;
        }
        mean[n] = mu;
        var[n] = ss / mf;
    }

    let gam = g.value(gamma).clone();
    let bet = g.value(beta).clone();
    let plane = xs.plane_len();
    let mut out = Tensor::zeros(xs);
    {
        let dst = out.data_mut();
        for n in 0..xs.n {
            let s = (var[n] + eps).sqrt();
            let base = xs.row(n, 0, 0);
            for c in 0..xs.c {
                let k = gam.data()[c] / s;
                let b = bet.data()[c] - mean[n] * k;
                for i in base + c * plane..base + (c + 1) * plane {
                    dst[i] = xv.data()[i] * k + b;
                }
            }
        }
    }
    g.push_op(
        out,
        vec![x, gamma, beta],
        Box::new(LayerNormOp { mean, var, eps }),
    )
}
