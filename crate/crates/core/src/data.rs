//! Image ingestion, patch datasets and the seeded Gaussian noise model.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::SamplePair;
use crate::tensor::Image;

pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];
/// Stream reserved for patch placement; noise uses the sample id as stream.
const PATCH_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone)]
pub struct LoadedImage {
    pub path: PathBuf,
    pub image: Image,
}

/// Decodes one file into luma values in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Image> {
    let decoded = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    // 16-bit widening is exact, so 8-bit inputs land on v / 255.
    if !decoded.color().has_color() {
        let gray = decoded.to_luma16();
        let (w, h) = gray.dimensions();
        let data = gray.pixels().map(|p| p.0[0] as f64 / 65535.0).collect();
        return Image::new(h as usize, w as usize, data);
    }
    let rgb = decoded.to_rgb16();
    let (w, h) = rgb.dimensions();
    let data = rgb
        .pixels()
        .map(|p| {
            let [r, g, b] = p.0.map(|c| c as f64 / 65535.0);
            LUMA[0] * r + LUMA[1] * g + LUMA[2] * b
        })
        .collect();
    Image::new(h as usize, w as usize, data)
}

/// Every decodable image in `dir`, in lexicographic file-name order.
/// Undecodable files are skipped with a warning.
pub fn load_images(dir: &Path) -> Result<Vec<LoadedImage>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::Data(format!("cannot read {}: {e}", dir.display())))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry?.path();
        if path.is_file() {
            paths.push(path);
        }
    }
    paths.sort();
    let decoded: Vec<Option<LoadedImage>> = paths
        .par_iter()
        .map(|path| match load_image(path) {
            Ok(image) => Some(LoadedImage {
                path: path.clone(),
                image,
            }),
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                None
            }
        })
        .collect();
    let images: Vec<LoadedImage> = decoded.into_iter().flatten().collect();
    if images.is_empty() {
        return Err(Error::Data(format!("no readable images in {}", dir.display())));
    }
    Ok(images)
}

/// Writes an image as 8 bits per pixel, clamping to `[0, 1]`. The format
/// follows the file extension.
pub fn save_image(path: &Path, img: &Image) -> Result<()> {
    let (h, w) = img.shape();
    let bytes: Vec<u8> = img.values().iter().map(|v| quantize(*v)).collect();
    let buf = image::GrayImage::from_raw(w as u32, h as u32, bytes).expect("buffer sized to image");
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// `[0, 1]` value to the nearest 8-bit level.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// The 8-bit round-trip of an image.
pub fn quantized(img: &Image) -> Image {
    img.map(|v| quantize(v) as f64 / 255.0)
}

/// Largest centred window whose sides are multiples of `multiple`.
pub fn centre_crop(img: &Image, multiple: usize) -> Result<Image> {
    let (h, w) = img.shape();
    let (ch, cw) = (h / multiple * multiple, w / multiple * multiple);
    if ch == 0 || cw == 0 {
        return Err(Error::dim(format!("image at least {multiple}x{multiple}"), format!("{h}x{w}")));
    }
    img.crop((h - ch) / 2, (w - cw) / 2, (ch, cw))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchLocation {
    pub source: usize,
    pub top: usize,
    pub left: usize,
}

/// Draws `count` square patches: a uniform source among the images that are
/// large enough, then a uniform top-left corner.
pub fn extract_patches(
    images: &[Image],
    patch_size: usize,
    count: usize,
    seed: u64,
) -> Result<(Vec<PatchLocation>, Vec<Image>)> {
    if patch_size == 0 {
        return Err(Error::Config("patch_size must be positive".into()));
    }
    let usable: Vec<usize> = images
        .iter()
        .enumerate()
        .filter(|(_, img)| img.height() >= patch_size && img.width() >= patch_size)
        .map(|(i, _)| i)
        .collect();
    if usable.is_empty() {
        return Err(Error::Data(format!(
            "no source image is at least {patch_size}x{patch_size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(PATCH_STREAM);
    let mut locations = Vec::with_capacity(count);
    let mut patches = Vec::with_capacity(count);
    for _ in 0..count {
        let source = usable[rng.random_range(0..usable.len())];
        let img = &images[source];
        let top = rng.random_range(0..=img.height() - patch_size);
        let left = rng.random_range(0..=img.width() - patch_size);
        patches.push(img.crop(top, left, (patch_size, patch_size))?);
        locations.push(PatchLocation { source, top, left });
    }
    Ok((locations, patches))
}

/// `clean + σ ε` with `ε` i.i.d. standard normal, unclipped.
///
/// The normals come from the Box–Muller transform applied to consecutive
/// uniform pairs of a ChaCha8 stream keyed by `(seed, id)`: with
/// `u1 ∈ (0, 1]`, `u2 ∈ [0, 1)`, `r = sqrt(−2 ln u1)` the pair yields
/// `r cos 2πu2` and `r sin 2πu2`.
pub fn add_noise(clean: &Image, sigma: f64, seed: u64, id: u64) -> Image {
    if sigma == 0.0 {
        return clean.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    let mut spare: Option<f64> = None;
    clean.map(|v| {
        let e = match spare.take() {
            Some(e) => e,
            None => {
                let u1 = 1.0 - rng.random::<f64>();
                let u2 = rng.random::<f64>();
                let r = (-2.0 * u1.ln()).sqrt();
                let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
                spare = Some(r * s);
                r * c
            }
        };
        v + sigma * e
    })
}

/// Everything needed to regenerate a dataset exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub sources: Vec<String>,
    pub seed: u64,
    pub noise_sigma: f64,
    pub patch_size: usize,
    pub count: usize,
    pub patches: Vec<PatchLocation>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<SamplePair>,
    pub patch_size: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    pub manifest: DatasetManifest,
}

impl Dataset {
    /// Patches from in-memory images; sample `i` gets id `i` and its own noise
    /// stream.
    pub fn from_images(
        sources: &[String],
        images: &[Image],
        patch_size: usize,
        count: usize,
        noise_sigma: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise sigma must be non-negative, got {noise_sigma}")));
        }
        if count == 0 {
            return Err(Error::Config("patch count must be positive".into()));
        }
        let (patches, clean) = extract_patches(images, patch_size, count, seed)?;
        let samples = clean
            .into_iter()
            .enumerate()
            .map(|(i, c)| {
                let noisy = add_noise(&c, noise_sigma, seed, i as u64);
                SamplePair::new(i as u64, c, noisy)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            samples,
            patch_size,
            noise_sigma,
            seed,
            manifest: DatasetManifest {
                sources: sources.to_vec(),
                seed,
                noise_sigma,
                patch_size,
                count,
                patches,
            },
        })
    }

    pub fn from_dir(dir: &Path, patch_size: usize, count: usize, noise_sigma: f64, seed: u64) -> Result<Self> {
        let loaded = load_images(dir)?;
        let names: Vec<String> = loaded.iter().map(|l| l.path.display().to_string()).collect();
        let images: Vec<Image> = loaded.into_iter().map(|l| l.image).collect();
        Self::from_images(&names, &images, patch_size, count, noise_sigma, seed)
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(&self.manifest)?)?;
        Ok(())
    }
}
