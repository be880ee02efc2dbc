//! Dense 4-D tensors (batch, channel, height, width) and the tape-based
//! reverse-mode autodiff they plug into.
//!
//! Values are 32-bit floats in row-major BCHW layout. Tensors are immutable
//! once built; ops produce new tensors. Every forward pass is a pure function
//! of its inputs, and internal parallelism keeps a fixed reduction order so
//! two runs on identical bits produce identical bits.

mod gradcheck;
mod ops;
mod pool;
mod tape;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use ops::{bilinear_sample, ConvSpec, ResBlockVars};
pub use pool::thread_pool;
pub use tape::{Gradients, Tape, Var};

pub(crate) use ops::{bilinear_plane, bilinear_scatter, dot_f32};
pub(crate) use pool::par_chunks;

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Extents of a 4-D tensor: batch, channel, height, width.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape {
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(b: usize, c: usize, h: usize, w: usize) -> Shape {
        assert!(
            b >= 1 && c >= 1 && h >= 1 && w >= 1,
            "all extents must be >= 1, got {b}x{c}x{h}x{w}"
        );
        Shape { b, c, h, w }
    }

    /// Total element count.
    pub fn count(&self) -> usize {
        self.b * self.c * self.h * self.w
    }

    /// Flat index of (b, c, y, x) in row-major layout.
    #[inline(always)]
    pub fn idx(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        ((b * self.c + c) * self.h + y) * self.w + x
    }

    /// Spatial extents as (h, w).
    pub fn spatial(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn is_scalar(&self) -> bool {
        self.count() == 1
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.b, self.c, self.h, self.w)
    }
}

/// Immutable dense BCHW tensor of 32-bit reals.
///
/// Cloning is cheap: the buffer is shared behind an `Arc`.
#[derive(Clone)]
pub struct Tensor {
    shape: Shape,
    data: Arc<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f32>) -> Tensor {
        assert_eq!(
            shape.count(),
            data.len(),
            "shape {} does not match buffer length {}",
            shape,
            data.len()
        );
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: Shape) -> Tensor {
        Tensor::new(shape, vec![0.0; shape.count()])
    }

    pub fn full(shape: Shape, value: f32) -> Tensor {
        Tensor::new(shape, vec![value; shape.count()])
    }

    /// 1x1x1x1 tensor holding one value.
    pub fn scalar(value: f32) -> Tensor {
        Tensor::new(Shape::new(1, 1, 1, 1), vec![value])
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f32) -> Tensor {
        let mut data = Vec::with_capacity(shape.count());
        for b in 0..shape.b {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(b, c, y, x));
                    }
                }
            }
        }
        Tensor::new(shape, data)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false // shapes have all extents >= 1
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline(always)]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.shape.idx(b, c, y, x)]
    }

    /// Value of a 1x1x1x1 tensor.
    pub fn scalar_value(&self) -> f32 {
        assert!(self.shape.is_scalar(), "expected scalar, got {}", self.shape);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor::new(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor::new(self.shape, data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Index and value of the first non-finite element, if any.
    pub fn first_non_finite(&self) -> Option<(usize, f32)> {
        self.data
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite())
            .map(|(i, &v)| (i, v))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a - b).abs())
            .fold(0.0f32, f32::max)
    }

    /// Bit-exact equality of shape and every element.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Sum of all elements, accumulated in f64 in index order.
    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    /// Mean squared difference, accumulated in f64.
    pub fn mse(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "mse shape mismatch");
        let n = self.len() as f64;
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| {
                let d = (a - b) as f64;
                d * d
            })
            .sum::<f64>()
            / n
    }

    pub(crate) fn require_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                op,
                format!("{} vs {}", self.shape, other.shape),
            ));
        }
        Ok(())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor({})", self.shape)
    }
}
