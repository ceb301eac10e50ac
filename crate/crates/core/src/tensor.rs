//! Dense rank-4 NCHW tensors and small row-major matrices.

use std::fmt;
use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

/// Shape of an NCHW tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Elements in one spatial plane.
    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub const fn with_channels(self, c: usize) -> Self {
        Self { c, ..self }
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Rank-4 float tensor in NCHW layout with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    shape: Shape4,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
}

impl Tensor4 {
    pub fn zeros(shape: Shape4) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Shape4, value: f32) -> Self {
        Self {
            shape,
            data: vec![value; shape.numel()],
            grad: None,
        }
    }

    pub fn from_vec(shape: Shape4, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(shape_err(
                "tensor",
                format!("shape {shape} needs {} elements, got {}", shape.numel(), data.len()),
            ));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    /// Standard-normal entries scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: Shape4, std: f32, rng: &mut R) -> Self {
        let data = (0..shape.numel())
            .map(|_| {
                let z: f32 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Self {
            shape,
            data,
            grad: None,
        }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: Shape4, lo: f32, hi: f32, rng: &mut R) -> Self {
        let data = (0..shape.numel()).map(|_| rng.random_range(lo..hi)).collect();
        Self {
            shape,
            data,
            grad: None,
        }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, allocated as zeros on first access.
    pub fn grad_mut(&mut self) -> &mut [f32] {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![0.0; n])
    }

    pub fn set_grad(&mut self, grad: Vec<f32>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(shape_err("tensor", "gradient length differs from data length"));
        }
        self.grad = Some(grad);
        Ok(())
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + h) * self.shape.w + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f32 {
        self.data[self.index(n, c, h, w)]
    }

    /// Contiguous spatial plane of sample `n`, channel `c`.
    #[inline]
    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    #[inline]
    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f32] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &mut self.data[start..start + p]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&x| f(x)).collect(),
            grad: None,
        }
    }

    pub fn add(&self, other: &Tensor4) -> Result<Self> {
        if self.shape != other.shape {
            return Err(shape_err(
                "add",
                format!("{} vs {}", self.shape, other.shape),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Self {
            shape: self.shape,
            data,
            grad: None,
        })
    }

    pub fn add_assign(&mut self, other: &Tensor4) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err(
                "add",
                format!("{} vs {}", self.shape, other.shape),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&x| x as f64).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor4) -> f32 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on different shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Samples `range` of the batch.
    pub fn slice_batch(&self, range: Range<usize>) -> Self {
        let s = self.shape;
        assert!(range.end <= s.n && range.start <= range.end, "batch range {range:?} outside {}", s.n);
        let per = s.c * s.plane();
        Self {
            shape: Shape4::new(range.len(), s.c, s.h, s.w),
            data: self.data[range.start * per..range.end * per].to_vec(),
            grad: None,
        }
    }

    /// Copy of channels `range` for every sample.
    pub fn slice_channels(&self, range: Range<usize>) -> Result<Self> {
        if range.end > self.shape.c || range.start > range.end {
            return Err(shape_err(
                "slice_channels",
                format!("range {range:?} outside {} channels", self.shape.c),
            ));
        }
        let s = self.shape;
        let out_shape = s.with_channels(range.len());
        let p = s.plane();
        let mut data = Vec::with_capacity(out_shape.numel());
        for n in 0..s.n {
            let start = (n * s.c + range.start) * p;
            data.extend_from_slice(&self.data[start..start + range.len() * p]);
        }
        Ok(Self {
            shape: out_shape,
            data,
            grad: None,
        })
    }

    /// Concatenation along the channel axis.
    pub fn concat_channels(parts: &[&Tensor4]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat_channels", "no inputs"))?
            .shape;
        let mut c = 0;
        for t in parts {
            let s = t.shape;
            if s.n != first.n || s.h != first.h || s.w != first.w {
                return Err(shape_err(
                    "concat_channels",
                    format!("{} vs {}", s, first),
                ));
            }
            c += s.c;
        }
        let out_shape = first.with_channels(c);
        let p = first.plane();
        let mut data = Vec::with_capacity(out_shape.numel());
        for n in 0..first.n {
            for t in parts {
                let start = n * t.shape.c * p;
                data.extend_from_slice(&t.data[start..start + t.shape.c * p]);
            }
        }
        Ok(Self {
            shape: out_shape,
            data,
            grad: None,
        })
    }
}

/// Row-major matrix, used for fully connected layers and logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err(
                "matrix",
                format!("({rows}, {cols}) needs {} elements, got {}", rows * cols, data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Views an (N, C, 1, 1) tensor as an (N, C) matrix.
    pub fn from_pooled(t: &Tensor4) -> Result<Self> {
        let s = t.shape();
        if s.h != 1 || s.w != 1 {
            return Err(shape_err("matrix", format!("expected (N, C, 1, 1), got {s}")));
        }
        Self::from_vec(s.n, s.c, t.data().to_vec())
    }

    pub fn into_pooled(self) -> Tensor4 {
        let shape = Shape4::new(self.rows, self.cols, 1, 1);
        Tensor4::from_vec(shape, self.data).expect("matrix element count matches shape")
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f32 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor4::from_vec(Shape4::new(1, 2, 2, 2), vec![0.0; 7]).is_err());
        assert!(Tensor4::from_vec(Shape4::new(1, 2, 2, 2), vec![0.0; 8]).is_ok());
    }

    #[test]
    fn grad_has_data_shape() {
        let mut t = Tensor4::zeros(Shape4::new(2, 3, 1, 1));
        assert!(t.grad().is_none());
        assert_eq!(t.grad_mut().len(), 6);
        assert!(t.set_grad(vec![0.0; 5]).is_err());
    }

    #[test]
    fn concat_then_slice_restores_parts() {
        let a = Tensor4::from_vec(Shape4::new(2, 1, 1, 2), vec![1., 2., 3., 4.]).unwrap();
        let b = Tensor4::from_vec(Shape4::new(2, 2, 1, 2), (0..8).map(|x| x as f32).collect())
            .unwrap();
        let cat = Tensor4::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), Shape4::new(2, 3, 1, 2));
        assert_eq!(cat.slice_channels(0..1).unwrap(), a);
        assert_eq!(cat.slice_channels(1..3).unwrap(), b);
    }
}
