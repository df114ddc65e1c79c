//! Immutable dense tensor value.
//!
//! `Tensor` is a cheap-to-clone handle (`Arc` payload). Ops never mutate an
//! existing tensor; gradient accumulation uses `data_mut`, which is
//! copy-on-write and therefore safe against aliasing with values still held
//! by the graph.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::shape::Shape;

#[derive(Clone, Debug)]
pub struct Tensor<S: Scalar> {
    shape: Shape,
    data: Arc<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Shape, data: Vec<S>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::shape(
                "tensor construction",
                format!("{} elements", data.len()),
                shape,
            ));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: Arc::new(vec![S::zero(); shape.len()]),
        }
    }

    pub fn full(shape: Shape, value: S) -> Self {
        Tensor {
            shape,
            data: Arc::new(vec![value; shape.len()]),
        }
    }

    /// Scalar tensor of shape 1x1x1x1.
    pub fn scalar(value: S) -> Self {
        Tensor::full(Shape::new(1, 1, 1, 1), value)
    }

    /// Build from a function of the logical index.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> S) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.shape.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    /// Mutable view; clones the payload if this handle is shared.
    pub fn data_mut(&mut self) -> &mut [S] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    #[inline(always)]
    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> S {
        self.data[self.shape.at(n, c, h, w)]
    }

    #[inline(always)]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, value: S) {
        let i = self.shape.at(n, c, h, w);
        self.data_mut()[i] = value;
    }

    /// First element; convenient for 1x1x1x1 scalars.
    pub fn item(&self) -> S {
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Tensor<S> {
        Tensor {
            shape: self.shape,
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    /// Elementwise accumulate: `self += other`. Shapes must match.
    pub fn accumulate(&mut self, other: &Tensor<S>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("accumulate", self.shape, other.shape));
        }
        let dst = self.data_mut();
        for (d, s) in dst.iter_mut().zip(other.data.iter()) {
            *d = *d + *s;
        }
        Ok(())
    }

    pub fn max_abs(&self) -> S {
        self.data
            .iter()
            .fold(S::zero(), |acc, v| acc.max(v.abs()))
    }

    /// Convert elementwise to another scalar type through f64.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape,
            data: Arc::new(
                self.data
                    .iter()
                    .map(|v| T::from_f64(v.as_f64()))
                    .collect(),
            ),
        }
    }

    pub fn require_shape(&self, expected: Shape, context: &str) -> Result<()> {
        if self.shape != expected {
            return Err(Error::shape(context, self.shape, expected));
        }
        Ok(())
    }
}

/// Largest absolute elementwise difference, as f64 for reporting.
///
/// Panics on shape mismatch — this is a diagnostic helper, not an op.
pub fn max_abs_diff<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "max_abs_diff shape mismatch");
    let mut worst = 0.0f64;
    for (x, y) in a.data().iter().zip(b.data().iter()) {
        let d = (x.as_f64() - y.as_f64()).abs();
        if d > worst {
            worst = d;
        }
    }
    worst
}
