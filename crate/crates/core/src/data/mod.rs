//! Synthetic lesion images, PGM and manifest I/O, cross-validation folds and
//! training-time augmentation.

mod augment;
mod folds;
mod manifest;
pub mod pgm;

pub use augment::{augment, AugmentParams};
pub use folds::{make_folds, FoldSplit};
pub use manifest::{load_dataset, write_dataset, ManifestRow, MANIFEST_HEADER};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::tensor::{Shape, Tensor};

/// One image, its binary ground truth, and whether the ground truth has any
/// foreground. Images are `1×1×H×W` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor,
    pub mask: Mask,
    pub has_lesion: bool,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Tensor, mask: Mask) -> Result<Self> {
        let id = id.into();
        let s = image.shape();
        if s.batch() != 1 || s.channels() != 1 || s.height() != mask.height() || s.width() != mask.width() {
            return Err(Error::dim(
                "sample",
                "height/width",
                format!(
                    "{id}: image {s} does not match mask {}×{}",
                    mask.height(),
                    mask.width()
                ),
            ));
        }
        let has_lesion = !mask.is_empty();
        Ok(Sample {
            id,
            image,
            mask,
            has_lesion,
        })
    }

    pub fn height(&self) -> usize {
        self.mask.height()
    }

    pub fn width(&self) -> usize {
        self.mask.width()
    }
}

/// Identifier of the `index`-th lesion (or clean) sample.
pub fn sample_id(lesion: bool, index: usize) -> String {
    if lesion {
        format!("lesion_{index:05}")
    } else {
        format!("clean_{index:05}")
    }
}

/// `n_lesion` images with 1–3 blobs followed by `n_clean` background-only
/// images. Each sample draws from its own stream of the seeded generator,
/// so a sample does not depend on how many others are produced.
pub fn generate_dataset(n_lesion: usize, n_clean: usize, size: (usize, usize), seed: u64) -> Result<Vec<Sample>> {
    let (height, width) = size;
    if height < 4 || width < 4 {
        return Err(Error::Config(format!("image size {height}×{width} too small")));
    }
    let lesions = (0..n_lesion).map(|i| generate_sample(true, i, height, width, seed));
    let clean = (0..n_clean).map(|i| generate_sample(false, i, height, width, seed));
    lesions.chain(clean).collect()
}

fn sample_rng(seed: u64, lesion: bool, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * index as u64 + u64::from(!lesion));
    rng
}

fn generate_sample(lesion: bool, index: usize, height: usize, width: usize, seed: u64) -> Result<Sample> {
    let mut rng = sample_rng(seed, lesion, index);
    let mut pixels = background(&mut rng, height, width);
    let mut mask = Mask::empty(height, width);
    if lesion {
        // Redraw in the (unlikely) event that every blob thresholds away.
        while mask.is_empty() {
            let n_blobs = rng.gen_range(1..=3);
            let mut support = vec![0.0; height * width];
            for _ in 0..n_blobs {
                draw_ellipse(&mut rng, &mut support, height, width);
            }
            let soft = gaussian_blur(&support, height, width, 1.2);
            let offset = rng.gen_range(0.25..0.4);
            for (i, &s) in soft.iter().enumerate() {
                if s >= 0.5 {
                    mask.set(i / width, i % width, true);
                }
            }
            if !mask.is_empty() {
                for (p, s) in pixels.iter_mut().zip(&soft) {
                    *p += offset * s;
                }
            }
        }
    }
    for p in &mut pixels {
        *p = p.clamp(0.0, 1.0);
    }
    let image = Tensor::from_vec(Shape::new(1, 1, height, width), pixels)?;
    Sample::new(sample_id(lesion, index), image, mask)
}

/// Smooth value noise (random coarse grid, bilinear upsampling) plus fine
/// Gaussian noise.
fn background(rng: &mut ChaCha8Rng, height: usize, width: usize) -> Vec<f64> {
    let grid_h = 5;
    let grid_w = 5;
    let level = rng.gen_range(0.25..0.45);
    let grid: Vec<f64> = (0..grid_h * grid_w)
        .map(|_| level + rng.gen_range(-0.12..0.12))
        .collect();
    let mut out = Vec::with_capacity(height * width);
    for i in 0..height {
        let gy = i as f64 / (height - 1) as f64 * (grid_h - 1) as f64;
        let y0 = (gy.floor() as usize).min(grid_h - 2);
        let fy = gy - y0 as f64;
        for j in 0..width {
            let gx = j as f64 / (width - 1) as f64 * (grid_w - 1) as f64;
            let x0 = (gx.floor() as usize).min(grid_w - 2);
            let fx = gx - x0 as f64;
            let at = |y: usize, x: usize| grid[y * grid_w + x];
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
            let bottom = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
            let fine: f64 = rng.sample(StandardNormal);
            out.push(top * (1.0 - fy) + bottom * fy + 0.03 * fine);
        }
    }
    out
}

/// Marks the support of a randomly placed, rotated ellipse.
fn draw_ellipse(rng: &mut ChaCha8Rng, support: &mut [f64], height: usize, width: usize) {
    let side = height.min(width) as f64;
    let cy = rng.gen_range(0.2..0.8) * height as f64;
    let cx = rng.gen_range(0.2..0.8) * width as f64;
    let ry = rng.gen_range(0.06..0.16) * side;
    let rx = rng.gen_range(0.06..0.16) * side;
    let theta = rng.gen_range(0.0..std::f64::consts::PI);
    let (sin, cos) = theta.sin_cos();
    for i in 0..height {
        for j in 0..width {
            let dy = i as f64 + 0.5 - cy;
            let dx = j as f64 + 0.5 - cx;
            let u = dx * cos + dy * sin;
            let v = -dx * sin + dy * cos;
            if (u / rx).powi(2) + (v / ry).powi(2) <= 1.0 {
                support[i * width + j] = 1.0;
            }
        }
    }
}

/// Separable Gaussian blur with edge clamping.
fn gaussian_blur(src: &[f64], height: usize, width: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;

    let mut tmp = vec![0.0; src.len()];
    for i in 0..height {
        for j in 0..width {
            tmp[i * width + j] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * src[i * width + clamp(j as isize + k as isize - radius, width)])
                .sum();
        }
    }
    let mut out = vec![0.0; src.len()];
    for i in 0..height {
        for j in 0..width {
            out[i * width + j] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * tmp[clamp(i as isize + k as isize - radius, height) * width + j])
                .sum();
        }
    }
    out
}

/// Fails unless every sample contains foreground; training sets are built
/// from lesion images only.
pub fn ensure_lesion_only(samples: &[Sample]) -> Result<()> {
    if let Some(s) = samples.iter().find(|s| !s.has_lesion) {
        return Err(Error::Contract(format!(
            "training set contains image '{}' without foreground",
            s.id
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lesion_samples_have_foreground() {
        let samples = generate_dataset(10, 0, (64, 64), 3).unwrap();
        assert_eq!(samples.len(), 10);
        assert!(samples.iter().all(|s| s.has_lesion && !s.mask.is_empty()));
    }

    #[test]
    fn clean_samples_are_empty_and_in_range() {
        let samples = generate_dataset(2, 5, (32, 48), 3).unwrap();
        assert_eq!(samples.iter().filter(|s| !s.has_lesion).count(), 5);
        for s in &samples {
            assert_eq!(s.has_lesion, !s.mask.is_empty());
            assert_eq!((s.height(), s.width()), (32, 48));
            assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn generation_is_deterministic_and_prefix_stable() {
        let a = generate_dataset(4, 2, (32, 32), 9).unwrap();
        let b = generate_dataset(4, 2, (32, 32), 9).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(6, 2, (32, 32), 9).unwrap();
        assert_eq!(a[..4], c[..4]);
        let d = generate_dataset(4, 2, (32, 32), 10).unwrap();
        assert_ne!(a[0].image, d[0].image);
    }

    #[test]
    fn lesions_are_brighter_than_background() {
        let samples = generate_dataset(20, 0, (64, 64), 1).unwrap();
        for s in &samples {
            let (mut fg, mut nf, mut bg, mut nb) = (0.0, 0, 0.0, 0);
            for (v, &m) in s.image.data().iter().zip(s.mask.bits()) {
                if m {
                    fg += v;
                    nf += 1;
                } else {
                    bg += v;
                    nb += 1;
                }
            }
            assert!(fg / nf as f64 > bg / nb as f64 + 0.1, "{}", s.id);
        }
    }

    #[test]
    fn lesion_only_guard() {
        let samples = generate_dataset(2, 1, (16, 16), 0).unwrap();
        assert!(ensure_lesion_only(&samples[..2]).is_ok());
        assert!(ensure_lesion_only(&samples).is_err());
    }
}
