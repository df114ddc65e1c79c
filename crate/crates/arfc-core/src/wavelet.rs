//! Typed single-level Haar decomposition of an NCHW tensor.
//!
//! The graph ops in `ops` work on a packed (N, 4C, H/2, W/2) layout; this
//! module is the tensor-level view with the four subbands as named fields,
//! used by tests, oracles, and anything that wants plain (non-autodiff)
//! wavelet math.

use crate::error::{Error, Result};
use crate::ops::{haar_analyze_kernel, haar_fuse_kernel, haar_synthesize_kernel};
use crate::scalar::Scalar;
use crate::shape::Shape;
use crate::tensor::Tensor;

/// The four half-resolution subbands of one analysis level.
///
/// `ll` is the coarse approximation; `lh`, `hl`, `hh` hold horizontal,
/// vertical, and diagonal detail. All four share one shape.
#[derive(Clone, Debug)]
pub struct WaveletSubbands<S: Scalar> {
    pub ll: Tensor<S>,
    pub lh: Tensor<S>,
    pub hl: Tensor<S>,
    pub hh: Tensor<S>,
    /// Spatial dims of the tensor that was analyzed.
    pub source_shape: (usize, usize),
}

impl<S: Scalar> WaveletSubbands<S> {
    pub fn new(
        ll: Tensor<S>,
        lh: Tensor<S>,
        hl: Tensor<S>,
        hh: Tensor<S>,
        source_shape: (usize, usize),
    ) -> Result<Self> {
        let shape = ll.shape();
        for (name, band) in [("lh", &lh), ("hl", &hl), ("hh", &hh)] {
            if band.shape() != shape {
                return Err(Error::shape(
                    &format!("subband {name} vs ll"),
                    shape,
                    band.shape(),
                ));
            }
        }
        if source_shape != (2 * shape.h, 2 * shape.w) {
            return Err(Error::Dimension(format!(
                "source shape {}x{} does not match subbands {shape}",
                source_shape.0, source_shape.1
            )));
        }
        Ok(WaveletSubbands {
            ll,
            lh,
            hl,
            hh,
            source_shape,
        })
    }

    pub fn band_shape(&self) -> Shape {
        self.ll.shape()
    }

    /// The detail stack: lh, hl, hh concatenated along channels (3C).
    pub fn f1(&self) -> Tensor<S> {
        let s = self.band_shape();
        let out_shape = Shape::new(s.n, 3 * s.c, s.h, s.w);
        let sample = s.sample_len();
        let mut out = Tensor::zeros(out_shape);
        let dst = out.data_mut();
        for n in 0..s.n {
            for (b, band) in [&self.lh, &self.hl, &self.hh].into_iter().enumerate() {
                let src = &band.data()[n * sample..(n + 1) * sample];
                let at = out_shape.row(n, b * s.c, 0);
                dst[at..at + sample].copy_from_slice(src);
            }
        }
        out
    }

    /// The approximation band.
    pub fn f2(&self) -> &Tensor<S> {
        &self.ll
    }

    /// Pack as (N, 4C, H/2, W/2) channel groups [ll | lh | hl | hh].
    pub fn pack(&self) -> Tensor<S> {
        let s = self.band_shape();
        let out_shape = Shape::new(s.n, 4 * s.c, s.h, s.w);
        let sample = s.sample_len();
        let mut out = Tensor::zeros(out_shape);
        let dst = out.data_mut();
        for n in 0..s.n {
            for (b, band) in [&self.ll, &self.lh, &self.hl, &self.hh]
                .into_iter()
                .enumerate()
            {
                let src = &band.data()[n * sample..(n + 1) * sample];
                let at = out_shape.row(n, b * s.c, 0);
                dst[at..at + sample].copy_from_slice(src);
            }
        }
        out
    }

    fn unpack(packed: &Tensor<S>, source_shape: (usize, usize)) -> Self {
        let ps = packed.shape();
        let c = ps.c / 4;
        let band_shape = Shape::new(ps.n, c, ps.h, ps.w);
        let sample = band_shape.sample_len();
        let mut bands: Vec<Tensor<S>> = (0..4).map(|_| Tensor::zeros(band_shape)).collect();
        for n in 0..ps.n {
            for (b, band) in bands.iter_mut().enumerate() {
                let src = packed.shape().row(n, b * c, 0);
                let dst = band.data_mut();
                dst[n * sample..(n + 1) * sample]
                    .copy_from_slice(&packed.data()[src..src + sample]);
            }
        }
        let mut it = bands.into_iter();
        WaveletSubbands {
            ll: it.next().unwrap(),
            lh: it.next().unwrap(),
            hl: it.next().unwrap(),
            hh: it.next().unwrap(),
            source_shape,
        }
    }
}

/// Decompose (N, C, H, W) into four (N, C, H/2, W/2) subbands. H and W must
/// be even.
pub fn haar_analyze<S: Scalar>(x: &Tensor<S>) -> Result<WaveletSubbands<S>> {
    let xs = x.shape();
    if xs.h % 2 != 0 || xs.w % 2 != 0 {
        return Err(Error::Dimension(format!(
            "haar analysis needs even spatial dims, got {xs}"
        )));
    }
    let packed = haar_analyze_kernel(x, S::one());
    Ok(WaveletSubbands::unpack(&packed, (xs.h, xs.w)))
}

/// Exact inverse of [`haar_analyze`].
pub fn haar_synthesize<S: Scalar>(subbands: &WaveletSubbands<S>) -> Tensor<S> {
    haar_synthesize_kernel(&subbands.pack(), S::from_f64(0.25))
}

/// Average of the four subbands: a fused half-resolution map.
pub fn haar_fuse_downsampled<S: Scalar>(subbands: &WaveletSubbands<S>) -> Tensor<S> {
    haar_fuse_kernel(&subbands.pack())
}
