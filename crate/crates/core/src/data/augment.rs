use rand::Rng;

use super::Sample;
use crate::mask::Mask;
use crate::tensor::{Shape, Tensor};

/// One draw of the training augmentation. Geometric parts act identically
/// on image and mask.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
    /// Counter-clockwise quarter turns, 0–3.
    pub quarter_turns: u8,
    /// Added to every pixel before clamping to `[0, 1]`.
    pub brightness: f64,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        flip_horizontal: false,
        flip_vertical: false,
        quarter_turns: 0,
        brightness: 0.0,
    };

    /// h-flip and v-flip with probability ½ each, uniform quarter turns, and
    /// a brightness offset from U(−0.1, 0.1).
    pub fn draw<R: Rng + ?Sized>(rng: &mut R) -> Self {
        AugmentParams {
            flip_horizontal: rng.gen_bool(0.5),
            flip_vertical: rng.gen_bool(0.5),
            quarter_turns: rng.gen_range(0..4),
            brightness: rng.gen_range(-0.1..0.1),
        }
    }

    pub fn apply(&self, sample: &Sample) -> Sample {
        let (h, w) = (sample.height(), sample.width());
        let mut pixels = sample.image.data().to_vec();
        let mut bits = sample.mask.bits().to_vec();
        let (mut h, mut w) = (h, w);
        if self.flip_horizontal {
            flip_h(&mut pixels, w);
            flip_h(&mut bits, w);
        }
        if self.flip_vertical {
            flip_v(&mut pixels, h, w);
            flip_v(&mut bits, h, w);
        }
        for _ in 0..self.quarter_turns {
            pixels = rotate_ccw(&pixels, h, w);
            bits = rotate_ccw(&bits, h, w);
            std::mem::swap(&mut h, &mut w);
        }
        if self.brightness != 0.0 {
            for p in &mut pixels {
                *p = (*p + self.brightness).clamp(0.0, 1.0);
            }
        }
        let image = Tensor::from_vec(Shape::new(1, 1, h, w), pixels).expect("augmented image shape");
        let mask = Mask::new(h, w, bits).expect("augmented mask shape");
        Sample::new(sample.id.clone(), image, mask).expect("augmented sample")
    }
}

/// Draws fresh parameters and applies them.
pub fn augment<R: Rng + ?Sized>(sample: &Sample, rng: &mut R) -> Sample {
    AugmentParams::draw(rng).apply(sample)
}

fn flip_h<T>(data: &mut [T], w: usize) {
    for row in data.chunks_mut(w) {
        row.reverse();
    }
}

fn flip_v<T>(data: &mut [T], h: usize, w: usize) {
    for i in 0..h / 2 {
        let (top, bottom) = data.split_at_mut((h - 1 - i) * w);
        top[i * w..(i + 1) * w].swap_with_slice(&mut bottom[..w]);
    }
}

/// Quarter turn counter-clockwise: an `h×w` grid becomes `w×h`.
fn rotate_ccw<T: Copy>(data: &[T], h: usize, w: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for i in 0..w {
        for j in 0..h {
            out.push(data[j * w + (w - 1 - i)]);
        }
    }
    out
}
