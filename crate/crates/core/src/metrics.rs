//! Image-quality metrics for images with peak value 1.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

pub fn mse(reference: &Image, test: &Image) -> Result<f64> {
    test.ensure_shape(reference.shape())?;
    if reference.is_empty() {
        return Err(Error::Data("mean squared error of an empty image".into()));
    }
    let sum: f64 = reference
        .values()
        .iter()
        .zip(test.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / reference.len() as f64)
}

/// `10 log10(1 / MSE)` in dB; `f64::INFINITY` for identical images.
pub fn psnr(reference: &Image, test: &Image) -> Result<f64> {
    let m = mse(reference, test)?;
    Ok(if m == 0.0 { f64::INFINITY } else { -10.0 * m.log10() })
}

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering with a normalised 1-D window.
fn filter_valid(values: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let n = g.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = (0..n).map(|b| g[b] * values[i * w + j + b]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..n).map(|a| g[a] * rows[(i + a) * ow + j]).sum();
        }
    }
    out
}

/// Mean structural similarity over all fully-contained 11×11 Gaussian
/// windows (σ = 1.5), with `C1 = 0.01²` and `C2 = 0.03²`.
pub fn ssim(reference: &Image, test: &Image) -> Result<f64> {
    test.ensure_shape(reference.shape())?;
    let (h, w) = reference.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::dim(
            format!("image at least {SSIM_WINDOW}x{SSIM_WINDOW}"),
            format!("{h}x{w}"),
        ));
    }
    let g = gaussian_window();
    let x = reference.values();
    let y = test.values();
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { x.iter().zip(y).map(|(&a, &b)| f(a, b)).collect() };
    let mx = filter_valid(x, h, w, &g);
    let my = filter_valid(y, h, w, &g);
    let mxx = filter_valid(&prod(&|a, _| a * a), h, w, &g);
    let myy = filter_valid(&prod(&|_, b| b * b), h, w, &g);
    let mxy = filter_valid(&prod(&|a, b| a * b), h, w, &g);
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let sxx = mxx[i] - ux * ux;
            let syy = myy[i] - uy * uy;
            let sxy = mxy[i] - ux * uy;
            ((2.0 * ux * uy + C1) * (2.0 * sxy + C2)) / ((ux * ux + uy * uy + C1) * (sxx + syy + C2))
        })
        .sum();
    Ok(total / mx.len() as f64)
}

/// Per-image PSNR/SSIM values with their means and population standard
/// deviations.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl MetricReport {
    pub fn from_values(psnr: Vec<f64>, ssim: Vec<f64>) -> Result<Self> {
        if psnr.len() != ssim.len() {
            return Err(Error::dim(psnr.len(), ssim.len()));
        }
        let (psnr_mean, psnr_std) = mean_std(&psnr);
        let (ssim_mean, ssim_std) = mean_std(&ssim);
        Ok(Self {
            psnr,
            ssim,
            psnr_mean,
            psnr_std,
            ssim_mean,
            ssim_std,
        })
    }

    /// Scores every `(reference, test)` pair.
    pub fn compute(pairs: &[(&Image, &Image)]) -> Result<Self> {
        let mut p = Vec::with_capacity(pairs.len());
        let mut s = Vec::with_capacity(pairs.len());
        for (a, b) in pairs {
            p.push(psnr(a, b)?);
            s.push(ssim(a, b)?);
        }
        Self::from_values(p, s)
    }
}
