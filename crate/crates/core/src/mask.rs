use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Binary H×W segmentation mask.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::dim(
                "mask",
                "height/width",
                format!("{height}×{width} mask needs {} values, got {}", height * width, bits.len()),
            ));
        }
        Ok(Mask {
            height,
            width,
            bits,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    /// Reads a `1×1×H×W` (or `H×W`-sized) tensor whose values are exactly 0 or 1.
    pub fn from_binary_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.batch() != 1 || s.channels() != 1 {
            return Err(Error::dim(
                "mask",
                "batch/channels (axes 0,1)",
                format!("expected 1×1×H×W, got {s}"),
            ));
        }
        let mut bits = Vec::with_capacity(t.numel());
        for &v in t.data() {
            if v == 1.0 {
                bits.push(true);
            } else if v == 0.0 {
                bits.push(false);
            } else {
                return Err(Error::Domain {
                    op: "mask",
                    detail: format!("non-binary value {v}"),
                });
            }
        }
        Mask::new(s.height(), s.width(), bits)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bits[row * self.width + col] = value;
    }

    /// Number of foreground pixels.
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn same_size(&self, other: &Mask) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// `1×1×H×W` tensor of zeros and ones.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Tensor::from_vec(Shape::new(1, 1, self.height, self.width), data).expect("mask shape")
    }
}
