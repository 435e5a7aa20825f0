//! Image similarity on `[3, H, W]` images in `[0, 1]`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PSNR_CAP_DB: f64 = 99.0;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Two same-shape images, clamped to `[0, 1]` on construction.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    reference: Tensor,
    candidate: Tensor,
}

impl ImagePair {
    pub fn new(reference: &Tensor, candidate: &Tensor) -> Result<Self> {
        if reference.shape() != candidate.shape() || reference.shape().len() != 3 {
            return Err(Error::shape(
                "image pair",
                format!("{:?} vs {:?}, expected matching [C, H, W]", reference.shape(), candidate.shape()),
            ));
        }
        let clamp = |t: &Tensor| t.map(|v| v.clamp(0.0, 1.0));
        Ok(Self { reference: clamp(reference), candidate: clamp(candidate) })
    }

    /// From generator outputs in `[−1, 1]`.
    pub fn from_generated(reference: &Tensor, candidate: &Tensor) -> Result<Self> {
        let to_unit = |t: &Tensor| t.map(|v| (v + 1.0) * 0.5);
        Self::new(&to_unit(reference), &to_unit(candidate))
    }

    pub fn reference(&self) -> &Tensor {
        &self.reference
    }

    pub fn candidate(&self) -> &Tensor {
        &self.candidate
    }
}

pub fn mse(pair: &ImagePair) -> f64 {
    let sum: f64 = pair
        .reference
        .data()
        .iter()
        .zip(pair.candidate.data())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum();
    sum / pair.reference.len() as f64
}

/// `10·log10(1 / MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr(pair: &ImagePair) -> f64 {
    let e = mse(pair);
    if e == 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (1.0 / e).log10()).min(PSNR_CAP_DB)
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = g.iter().sum();
    let g: Vec<f64> = g.iter().map(|v| v / total).collect();
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for a in &g {
        for b in &g {
            w.push(a * b);
        }
    }
    w
}

/// Mean local SSIM over all fully-contained 11×11 Gaussian windows,
/// averaged over channels.
pub fn ssim(pair: &ImagePair) -> Result<f64> {
    let shape = pair.reference.shape();
    let (channels, h, w) = (shape[0], shape[1], shape[2]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    let window = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let plane = h * w;
    let mut total = 0.0;
    for ch in 0..channels {
        let x = &pair.reference.data()[ch * plane..(ch + 1) * plane];
        let y = &pair.candidate.data()[ch * plane..(ch + 1) * plane];
        let mut acc = 0.0;
        let mut count = 0usize;
        for oy in 0..=h - SSIM_WINDOW {
            for ox in 0..=w - SSIM_WINDOW {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for ky in 0..SSIM_WINDOW {
                    for kx in 0..SSIM_WINDOW {
                        let g = window[ky * SSIM_WINDOW + kx];
                        let i = (oy + ky) * w + ox + kx;
                        let (a, b) = (x[i] as f64, y[i] as f64);
                        mx += g * a;
                        my += g * b;
                        xx += g * a * a;
                        yy += g * b * b;
                        xy += g * a * b;
                    }
                }
                let vx = xx - mx * mx;
                let vy = yy - my * my;
                let cov = xy - mx * my;
                acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        total += acc / count as f64;
    }
    Ok(total / channels as f64)
}

/// `[H, W]` map of the per-pixel max-over-channels absolute difference,
/// divided by its maximum (all zeros for identical images).
pub fn difference_map(pair: &ImagePair) -> Tensor {
    let shape = pair.reference.shape();
    let (channels, h, w) = (shape[0], shape[1], shape[2]);
    let plane = h * w;
    let mut out = vec![0.0f32; plane];
    for ch in 0..channels {
        let a = &pair.reference.data()[ch * plane..(ch + 1) * plane];
        let b = &pair.candidate.data()[ch * plane..(ch + 1) * plane];
        for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
            *o = o.max((x - y).abs());
        }
    }
    let max = out.iter().fold(0.0f32, |m, &v| m.max(v));
    if max > 0.0 {
        out.iter_mut().for_each(|v| *v /= max);
    }
    Tensor::new(vec![h, w], out).expect("plane shape")
}
