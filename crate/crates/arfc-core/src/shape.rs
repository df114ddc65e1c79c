//! Dense rank-4 tensor layout: `(N, C, H, W)`, row-major with `W` contiguous.

use std::fmt::Display;

use crate::error::{Error, Result};

/// Shape of a rank-4 tensor. All tensors in this crate are rank 4; vectors and
/// per-channel parameters are carried as degenerate shapes such as
/// `(1, C, 1, 1)`.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat index of element `(n, c, h, w)`.
    #[inline(always)]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    /// Flat offset of the start of row `(n, c, h)`.
    #[inline(always)]
    pub fn row(&self, n: usize, c: usize, h: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w
    }

    /// Elements per sample (C·H·W).
    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    /// Elements per channel plane (H·W).
    pub fn plane_len(&self) -> usize {
        self.h * self.w
    }

    pub fn require_positive(&self, context: &str) -> Result<()> {
        if self.n == 0 || self.c == 0 || self.h == 0 || self.w == 0 {
            return Err(Error::Dimension(format!(
                "{context}: all dimensions must be positive, got {self}"
            )));
        }
        Ok(())
    }
}

impl Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}
