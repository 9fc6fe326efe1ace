//! PSNR and SSIM on interleaved RGB images in `[0,1]`.

use super::losses::LossError;
use crate::render::image_io::linear_to_srgb;

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64, LossError> {
    if a.len() != b.len() {
        return Err(LossError::Shape {
            what: "metric images",
            a: a.len(),
            b: b.len(),
        });
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// Linear values to the sRGB-encoded values an 8-bit image stores, in `[0,1]`.
pub fn to_display(linear: &[f64]) -> Vec<f64> {
    linear.iter().map(|&v| linear_to_srgb(v.clamp(0.0, 1.0))).collect()
}

/// PSNR of two linear images measured on their display encoding.
pub fn display_psnr(pred: &[f64], gt: &[f64]) -> Result<f64, LossError> {
    psnr(&to_display(pred), &to_display(gt))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < 1e-10 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// `10·log10(1/MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(a: &[f64], b: &[f64]) -> Result<f64, LossError> {
    Ok(psnr_from_mse(mse(a, b)?))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let x = i as f64 - half;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable valid-region Gaussian filter of one channel plane.
fn blur(plane: &[f64], width: usize, height: usize) -> (Vec<f64>, usize, usize) {
    let k = gaussian_window();
    let ow = width + 1 - SSIM_WINDOW;
    let oh = height + 1 - SSIM_WINDOW;
    let mut rows = vec![0.0; ow * height];
    for y in 0..height {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * plane[y * width + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

/// Mean SSIM over all valid 11×11 Gaussian windows (σ = 1.5) and channels,
/// with `K1 = 0.01`, `K2 = 0.03` and unit dynamic range.
pub fn ssim(a: &[f64], b: &[f64], width: usize, height: usize) -> Result<f64, LossError> {
    if a.len() != b.len() || a.len() != 3 * width * height {
        return Err(LossError::Shape {
            what: "ssim images",
            a: a.len(),
            b: b.len().max(3 * width * height),
        });
    }
    if width < SSIM_WINDOW || height < SSIM_WINDOW {
        return Err(LossError::TooSmall {
            width,
            height,
            min: SSIM_WINDOW,
        });
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        let pa: Vec<f64> = (0..width * height).map(|p| a[3 * p + c]).collect();
        let pb: Vec<f64> = (0..width * height).map(|p| b[3 * p + c]).collect();
        let prod = |f: &dyn Fn(usize) -> f64| (0..width * height).map(f).collect::<Vec<f64>>();
        let (mu_a, _, _) = blur(&pa, width, height);
        let (mu_b, _, _) = blur(&pb, width, height);
        let (saa, _, _) = blur(&prod(&|p| pa[p] * pa[p]), width, height);
        let (sbb, _, _) = blur(&prod(&|p| pb[p] * pb[p]), width, height);
        let (sab, _, _) = blur(&prod(&|p| pa[p] * pb[p]), width, height);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = saa[i] - ma * ma;
            let vb = sbb[i] - mb * mb;
            let cov = sab[i] - ma * mb;
            total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}
