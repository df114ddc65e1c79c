//! Radially symmetric spectral masks.
//!
//! Masks are stored in centered layout — `values[u][v]` with the zero
//! frequency at `center = (⌊H/2⌋, ⌊W/2⌋)` — and converted to raw DFT bin
//! order inside the filter op. Centro-symmetry about the center is validated
//! at construction: it is what keeps masked filtering of a real signal real
//! and self-adjoint.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum MaskKind {
    HighPass,
    LowPass,
    Custom,
}

#[derive(Clone, Debug)]
pub struct FrequencyMask<S: Scalar> {
    h: usize,
    w: usize,
    /// Centered layout, row-major (H, W).
    values: Vec<S>,
    pub d0: f64,
    /// Spectral center in centered layout: (⌊H/2⌋, ⌊W/2⌋).
    pub center: (usize, usize),
    pub kind: MaskKind,
}

impl<S: Scalar> FrequencyMask<S> {
    /// Cutoff radius: one twentieth of the longer side, floored, at least 1.
    pub fn cutoff_for(h: usize, w: usize) -> f64 {
        (h.max(w) / 20).max(1) as f64
    }

    /// Gaussian-attenuated high-pass: 0 inside the cutoff disk, then
    /// 1 − exp(−D0²/D²), which rises from 1 − e⁻¹ at D = D0 toward 1.
    pub fn high_pass(h: usize, w: usize) -> Self {
        let d0 = Self::cutoff_for(h, w);
        Self::build(h, w, d0, MaskKind::HighPass, |d| {
            if d < d0 {
                0.0
            } else {
                1.0 - (-d0 * d0 / (d * d)).exp()
            }
        })
    }

    /// Gaussian low-pass inside the cutoff disk — exp(−D²/D0²), falling to
    /// e⁻¹ at D = D0 — and 1 outside it.
    pub fn low_pass(h: usize, w: usize) -> Self {
        let d0 = Self::cutoff_for(h, w);
        Self::build(h, w, d0, MaskKind::LowPass, |d| {
            if d <= d0 {
                (-d * d / (d0 * d0)).exp()
            } else {
                1.0
            }
        })
    }

    /// All-pass mask: filtering with it is the identity (up to transform
    /// round-trip error).
    pub fn ones(h: usize, w: usize) -> Self {
        Self::build(h, w, Self::cutoff_for(h, w), MaskKind::Custom, |_| 1.0)
    }

    /// All-stop mask: filtering with it is the zero map.
    pub fn zeros(h: usize, w: usize) -> Self {
        Self::build(h, w, Self::cutoff_for(h, w), MaskKind::Custom, |_| 0.0)
    }

    fn build(h: usize, w: usize, d0: f64, kind: MaskKind, f: impl Fn(f64) -> f64) -> Self {
        let (u0, v0) = (h / 2, w / 2);
        let mut values = Vec::with_capacity(h * w);
        for u in 0..h {
            for v in 0..w {
                let du = u as f64 - u0 as f64;
                let dv = v as f64 - v0 as f64;
                values.push(S::from_f64(f((du * du + dv * dv).sqrt())));
            }
        }
        let mask = FrequencyMask {
            h,
            w,
            values,
            d0,
            center: (u0, v0),
            kind,
        };
        mask.validate().expect("radial builders are symmetric");
        mask
    }

    /// Construct from explicit centered-layout values. Rejects values outside
    /// [0, 1] and masks that are not centro-symmetric about the center.
    pub fn from_values(h: usize, w: usize, values: Vec<S>, d0: f64, kind: MaskKind) -> Result<Self> {
        if values.len() != h * w {
            return Err(Error::shape("frequency mask", values.len(), h * w));
        }
        let mask = FrequencyMask {
            h,
            w,
            values,
            d0,
            center: (h / 2, w / 2),
            kind,
        };
        mask.validate()?;
        Ok(mask)
    }

    fn validate(&self) -> Result<()> {
        let (u0, v0) = self.center;
        for u in 0..self.h {
            for v in 0..self.w {
                let val = self.values[u * self.w + v].as_f64();
                if !(0.0..=1.0).contains(&val) || !val.is_finite() {
                    return Err(Error::Config(format!(
                        "mask value {val} at ({u},{v}) outside [0,1]"
                    )));
                }
                // Mirror partner about the center, with wraparound.
                let mu = (2 * u0 + self.h - u) % self.h;
                let mv = (2 * v0 + self.w - v) % self.w;
                let mirror = self.values[mu * self.w + mv].as_f64();
                if (val - mirror).abs() > 1e-9 {
                    return Err(Error::Config(format!(
                        "mask not centro-symmetric: ({u},{v})={val} vs ({mu},{mv})={mirror}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    /// Mask value in centered layout.
    pub fn value_at(&self, u: usize, v: usize) -> S {
        self.values[u * self.w + v]
    }

    /// Multiplier table aligned with raw (unshifted) DFT bins: bin (p, q)
    /// reads the centered entry ((p + u0) mod H, (q + v0) mod W), which puts
    /// the center value on the DC bin.
    pub(crate) fn unshifted(&self) -> Vec<S> {
        let (u0, v0) = self.center;
        let mut out = Vec::with_capacity(self.h * self.w);
        for p in 0..self.h {
            let u = (p + u0) % self.h;
            for q in 0..self.w {
                let v = (q + v0) % self.w;
                out.push(self.values[u * self.w + v]);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cutoff_is_floored_and_clamped() {
        assert_eq!(FrequencyMask::<f64>::cutoff_for(64, 64), 3.0);
        assert_eq!(FrequencyMask::<f64>::cutoff_for(32, 32), 1.0);
        assert_eq!(FrequencyMask::<f64>::cutoff_for(4, 4), 1.0); // clamped
        assert_eq!(FrequencyMask::<f64>::cutoff_for(128, 40), 6.0);
    }

    #[test]
    fn mask_values_at_center_and_cutoff() {
        let h = 64;
        let hp = FrequencyMask::<f64>::high_pass(h, h);
        let lp = FrequencyMask::<f64>::low_pass(h, h);
        let (u0, v0) = hp.center;
        let d0 = hp.d0 as usize;

        assert_eq!(hp.value_at(u0, v0), 0.0);
        assert_eq!(lp.value_at(u0, v0), 1.0);

        // On-axis point at exactly D = D0.
        let e1 = (-1.0f64).exp();
        assert!((hp.value_at(u0 + d0, v0) - (1.0 - e1)).abs() < 1e-6);
        assert!((lp.value_at(u0 + d0, v0) - e1).abs() < 1e-6);

        // Low-pass re-admits everything outside the cutoff disk.
        assert_eq!(lp.value_at(0, 0), 1.0);
        // High-pass suppresses everything strictly inside it.
        assert_eq!(hp.value_at(u0, v0 + d0 - 1), 0.0);
    }

    #[test]
    fn asymmetric_mask_is_rejected() {
        let mut vals = vec![1.0f64; 16];
        vals[1] = 0.5; // break symmetry about (2,2)
        assert!(FrequencyMask::from_values(4, 4, vals, 1.0, MaskKind::Custom).is_err());
    }

    #[test]
    fn out_of_range_mask_is_rejected() {
        let vals = vec![1.5f64; 16];
        assert!(FrequencyMask::from_values(4, 4, vals, 1.0, MaskKind::Custom).is_err());
    }

    #[test]
    fn odd_dimensions_stay_symmetric() {
        // The floor-centered layout must validate for odd H, W too.
        let hp = FrequencyMask::<f64>::high_pass(5, 7);
        assert_eq!(hp.center, (2, 3));
        assert_eq!(hp.value_at(2, 3), 0.0);
    }
}
