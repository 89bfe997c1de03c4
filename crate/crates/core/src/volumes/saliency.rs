//! Patch-centre sampling with the image intensities as a saliency map.

use rand::Rng;

use crate::geometry::Vec3;
use crate::volumes::ImageStack;
use crate::{Error, Result};

/// Share of draws taken from the foreground map.
const FOREGROUND_SHARE: f64 = 2.0 / 3.0;

/// Draws world-space points with foreground and background in a 2:1 ratio.
///
/// Foreground draws follow the clamped intensities `max(I, 0)`; background
/// draws follow their complement `max(I+) - I+`. When the complement is empty
/// (a constant image) every draw uses the foreground map.
#[derive(Clone, Debug)]
pub struct SaliencySampler {
    dims: [usize; 3],
    affine: crate::geometry::Affine,
    foreground: Vec<f64>,
    background: Option<Vec<f64>>,
}

fn cumulative(weights: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut acc = 0.0;
    weights
        .map(|w| {
            acc += w;
            acc
        })
        .collect()
}

fn draw<R: Rng>(cdf: &[f64], rng: &mut R) -> usize {
    let total = *cdf.last().expect("non-empty map");
    let u = rng.random_range(0.0..total);
    cdf.partition_point(|&c| c <= u).min(cdf.len() - 1)
}

impl SaliencySampler {
    pub fn new(img: &ImageStack) -> Result<Self> {
        let clamped: Vec<f64> = img.data().iter().map(|&v| (v as f64).max(0.0)).collect();
        let max = clamped.iter().copied().fold(0.0, f64::max);
        if max <= 0.0 {
            return Err(Error::EmptyImage);
        }
        let foreground = cumulative(clamped.iter().copied());
        let background = cumulative(clamped.iter().map(|&v| max - v));
        let background = (*background.last().unwrap_or(&0.0) > 0.0).then_some(background);
        Ok(Self {
            dims: img.dims(),
            affine: *img.affine(),
            foreground,
            background,
        })
    }

    /// One centre in world millimetres, jittered uniformly within its voxel.
    pub fn sample_one<R: Rng>(&self, rng: &mut R) -> Vec3 {
        let use_fg = rng.random_bool(FOREGROUND_SHARE);
        let cdf = match (&self.background, use_fg) {
            (Some(bg), false) => bg,
            _ => &self.foreground,
        };
        let idx = draw(cdf, rng);
        let [nx, ny, _] = self.dims;
        let (i, j, k) = (idx % nx, (idx / nx) % ny, idx / (nx * ny));
        let p = [
            i as f64 + rng.random_range(-0.5..0.5),
            j as f64 + rng.random_range(-0.5..0.5),
            k as f64 + rng.random_range(-0.5..0.5),
        ];
        self.affine.apply(p)
    }

    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<Vec3> {
        (0..n).map(|_| self.sample_one(rng)).collect()
    }
}
