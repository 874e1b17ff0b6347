//! Dense rank-4 arrays and a define-by-run reverse-mode differentiation graph.
//!
//! Every array is laid out `NCHW` (batch, channels, height, width) and stores
//! 64-bit floats. Scalars are `1×1×1×1`.

mod graph;
mod kernels;
pub mod gradcheck;

pub use graph::{DiffTensor, Graph, NodeId};

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Shape of a rank-4 `NCHW` array.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub const SCALAR: Shape = Shape([1, 1, 1, 1]);

    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape([n, c, h, w])
    }

    pub fn batch(&self) -> usize {
        self.0[0]
    }

    pub fn channels(&self) -> usize {
        self.0[1]
    }

    pub fn height(&self) -> usize {
        self.0[2]
    }

    pub fn width(&self) -> usize {
        self.0[3]
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Number of elements in one image of the batch.
    pub fn image_len(&self) -> usize {
        self.0[1] * self.0[2] * self.0[3]
    }

    /// Number of elements in one channel plane.
    pub fn plane_len(&self) -> usize {
        self.0[2] * self.0[3]
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [n, c, h, w] = self.0;
        write!(f, "{n}×{c}×{h}×{w}")
    }
}

/// Plain dense array with no differentiation bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::dim(
                "tensor",
                "data length",
                format!("shape {shape} needs {} values, got {}", shape.numel(), data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(Shape::SCALAR, value)
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: Shape, lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..shape.numel()).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor { shape, data }
    }

    /// Standard normal samples scaled by `std`.
    pub fn normal<R: Rng + ?Sized>(shape: Shape, std: f64, rng: &mut R) -> Self {
        let data = (0..shape.numel())
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        let [_, cs, hs, ws] = self.shape.0;
        self.data[((n * cs + c) * hs + h) * ws + w]
    }

    /// The single value of a `1×1×1×1` tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "item() needs a single-element tensor, got shape {}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Extracts image `n` of the batch as a `1×C×H×W` tensor.
    pub fn image(&self, n: usize) -> Tensor {
        let len = self.shape.image_len();
        let [_, c, h, w] = self.shape.0;
        Tensor {
            shape: Shape::new(1, c, h, w),
            data: self.data[n * len..(n + 1) * len].to_vec(),
        }
    }

    /// Stacks same-shaped `1×C×H×W` tensors along the batch axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::Contract("stack of zero tensors".into()))?;
        let [_, c, h, w] = first.shape.0;
        let mut data = Vec::with_capacity(items.len() * first.numel());
        for t in items {
            if t.shape != Shape::new(1, c, h, w) {
                return Err(Error::dim(
                    "stack",
                    "channels/height/width",
                    format!("expected 1×{c}×{h}×{w}, got {}", t.shape),
                ));
            }
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            shape: Shape::new(items.len(), c, h, w),
            data,
        })
    }

    /// Mirrors every plane left-right.
    pub fn flip_horizontal(&self) -> Tensor {
        let w = self.shape.width();
        let mut out = self.data.clone();
        for row in out.chunks_mut(w) {
            row.reverse();
        }
        Tensor {
            shape: self.shape,
            data: out,
        }
    }

    /// Mirrors every plane top-bottom.
    pub fn flip_vertical(&self) -> Tensor {
        let [_, _, h, w] = self.shape.0;
        let mut out = Vec::with_capacity(self.data.len());
        for plane in self.data.chunks(h * w) {
            for row in plane.chunks(w).rev() {
                out.extend_from_slice(row);
            }
        }
        Tensor {
            shape: self.shape,
            data: out,
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![0.0; 3]).is_err());
        assert!(Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![0.0; 4]).is_ok());
    }

    #[test]
    fn flips_are_involutions() {
        let t = Tensor::from_vec(Shape::new(2, 1, 2, 3), (0..12).map(f64::from).collect()).unwrap();
        assert_eq!(t.flip_horizontal().data()[..3], [2.0, 1.0, 0.0]);
        assert_eq!(t.flip_vertical().data()[..3], [3.0, 4.0, 5.0]);
        assert_eq!(t.flip_horizontal().flip_horizontal(), t);
        assert_eq!(t.flip_vertical().flip_vertical(), t);
    }

    #[test]
    fn stack_and_image_are_inverse() {
        let a = Tensor::full(Shape::new(1, 2, 2, 2), 1.0);
        let b = Tensor::full(Shape::new(1, 2, 2, 2), 2.0);
        let s = Tensor::stack(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(s.shape(), Shape::new(2, 2, 2, 2));
        assert_eq!(s.image(0), a);
        assert_eq!(s.image(1), b);
    }
}
