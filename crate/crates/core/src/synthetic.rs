//! Seeded piecewise-smooth test images: a smooth background with
//! overlapping discs, rectangles and stripes of shaded intensity.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::save_image;
use crate::error::Result;
use crate::tensor::Image;

enum Shape {
    Disc { ci: f64, cj: f64, r: f64 },
    Rect { i0: f64, j0: f64, i1: f64, j1: f64 },
    Band { ci: f64, cj: f64, ni: f64, nj: f64, half: f64 },
}

impl Shape {
    fn contains(&self, i: f64, j: f64) -> bool {
        match *self {
            Shape::Disc { ci, cj, r } => (i - ci).powi(2) + (j - cj).powi(2) <= r * r,
            Shape::Rect { i0, j0, i1, j1 } => i >= i0 && i <= i1 && j >= j0 && j <= j1,
            Shape::Band { ci, cj, ni, nj, half } => ((i - ci) * ni + (j - cj) * nj).abs() <= half,
        }
    }
}

/// Affine intensity ramp `base + gi·i + gj·j`.
struct Shade {
    base: f64,
    gi: f64,
    gj: f64,
}

impl Shade {
    fn random(rng: &mut ChaCha8Rng, scale: f64) -> Self {
        Self {
            base: rng.random_range(0.1..0.9),
            gi: rng.random_range(-0.3..0.3) / scale,
            gj: rng.random_range(-0.3..0.3) / scale,
        }
    }

    fn at(&self, i: f64, j: f64) -> f64 {
        self.base + self.gi * i + self.gj * j
    }
}

/// An `h × w` image with values in `[0, 1]`, fully determined by `seed`.
pub fn piecewise_smooth(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = h.max(w) as f64;
    let background = Shade::random(&mut rng, scale);
    let count = rng.random_range(4..10);
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let ci = rng.random_range(0.0..h as f64);
        let cj = rng.random_range(0.0..w as f64);
        let size = rng.random_range(0.08..0.35) * scale;
        let shape = match rng.random_range(0..3) {
            0 => Shape::Disc { ci, cj, r: size },
            1 => Shape::Rect {
                i0: ci - size,
                j0: cj - size * rng.random_range(0.3..1.5),
                i1: ci + size * rng.random_range(0.3..1.5),
                j1: cj + size,
            },
            _ => {
                let angle = rng.random_range(0.0..std::f64::consts::PI);
                Shape::Band {
                    ci,
                    cj,
                    ni: angle.cos(),
                    nj: angle.sin(),
                    half: size * 0.3,
                }
            }
        };
        layers.push((shape, Shade::random(&mut rng, scale)));
    }
    Image::from_fn(h, w, |i, j| {
        let (fi, fj) = (i as f64, j as f64);
        let v = layers
            .iter()
            .rev()
            .find(|(s, _)| s.contains(fi, fj))
            .map_or_else(|| background.at(fi, fj), |(_, shade)| shade.at(fi, fj));
        v.clamp(0.0, 1.0)
    })
}

/// Writes `count` PNG images `synth_0000.png, …` into `dir` (created if
/// missing). Image `n` uses seed `seed + n`.
pub fn write_dataset(dir: &Path, count: usize, size: (usize, usize), seed: u64) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    (0..count)
        .map(|n| {
            let path = dir.join(format!("synth_{n:04}.png"));
            save_image(&path, &piecewise_smooth(size.0, size.1, seed.wrapping_add(n as u64)))?;
            Ok(path)
        })
        .collect()
}
