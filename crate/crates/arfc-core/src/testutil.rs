//! Shared helpers for unit tests: seeded randomness and brute-force oracles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::ops::Conv2dSpec;
use crate::scalar::Scalar;
use crate::shape::Shape;
use crate::tensor::Tensor;

pub fn seeded_rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

/// Uniform values in (−1, 1).
pub fn rng_tensor<S: Scalar>(rng: &mut impl Rng, shape: Shape) -> Tensor<S> {
    Tensor::from_fn(shape, |_, _, _, _| S::from_f64(rng.gen_range(-1.0..1.0)))
}

/// Six-loop reference convolution: no fast paths, no parallelism, indices
/// checked one by one. Deliberately naive so disagreements implicate the
/// production kernel.
pub fn conv2d_oracle<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, spec: &Conv2dSpec) -> Tensor<S> {
    let xs = x.shape();
    let (oh, ow) = spec.out_hw(xs.h, xs.w).unwrap();
    let out_shape = Shape::new(xs.n, spec.out_channels, oh, ow);
    let group_in = spec.in_channels / spec.groups;
    let group_out = spec.out_channels / spec.groups;
    let mut out = Tensor::zeros(out_shape);
    for n in 0..xs.n {
        for oc in 0..spec.out_channels {
            let g = oc / group_out;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = S::zero();
                    for icg in 0..group_in {
                        let ic = g * group_in + icg;
                        for ky in 0..spec.kernel_h {
                            for kx in 0..spec.kernel_w {
                                let iy = (oy * spec.stride + ky * spec.dilation) as isize
                                    - spec.padding.top as isize;
                                let ix = (ox * spec.stride + kx * spec.dilation) as isize
                                    - spec.padding.left as isize;
                                if iy < 0
                                    || ix < 0
                                    || iy >= xs.h as isize
                                    || ix >= xs.w as isize
                                {
                                    continue;
                                }
                                let xv = x.get(n, ic, iy as usize, ix as usize);
                                let wv = w.get(oc, icg, ky, kx);
                                acc = acc + xv * wv;
                            }
                        }
                    }
                    let idx = out_shape.at(n, oc, oy, ox);
                    out.data_mut()[idx] = acc;
                }
            }
        }
    }
    out
}
