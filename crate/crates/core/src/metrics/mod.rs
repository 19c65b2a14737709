//! Image quality and color-error metrics.

pub mod color;
pub mod scielab;

use ndarray::Array2;

pub use color::{cie76, ciede2000, srgb_to_lab};
pub use scielab::{scielab_map, ErrorMap, DEFAULT_PPD, DEFAULT_THRESHOLD};

use crate::error::{Error, Result};
use crate::image::{mse, ColorImage};

/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 100.0;

/// Peak signal-to-noise ratio in dB for unit peak.
pub fn psnr(a: &ColorImage, b: &ColorImage) -> Result<f64> {
    let e = mse(a, b)?;
    if e == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / e).log10()).min(PSNR_CAP))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

pub fn luma(img: &ColorImage) -> Array2<f64> {
    let c = img.channels();
    0.299 * &c[0] + 0.587 * &c[1] + 0.114 * &c[2]
}

fn valid_filter(plane: &Array2<f64>, taps: &[f64]) -> Array2<f64> {
    let (rows, cols) = plane.dim();
    let w = taps.len();
    let orows = rows + 1 - w;
    let ocols = cols + 1 - w;
    let horiz = Array2::from_shape_fn((rows, ocols), |(r, k)| (0..w).map(|t| taps[t] * plane[[r, k + t]]).sum::<f64>());
    Array2::from_shape_fn((orows, ocols), |(r, k)| (0..w).map(|t| taps[t] * horiz[[r + t, k]]).sum::<f64>())
}

/// Mean SSIM of the luma planes over all fully contained 11x11 Gaussian
/// windows.
pub fn ssim(a: &ColorImage, b: &ColorImage) -> Result<f64> {
    a.ensure_same_dim(b)?;
    let (rows, cols) = a.dim();
    if rows < SSIM_WINDOW || cols < SSIM_WINDOW {
        return Err(Error::InvalidParameter(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {rows}x{cols}"
        )));
    }
    let half = SSIM_WINDOW / 2;
    let mut taps: Vec<f64> =
        (0..SSIM_WINDOW).map(|i| (-((i as f64 - half as f64).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= total);

    let x = luma(a);
    let y = luma(b);
    let mx = valid_filter(&x, &taps);
    let my = valid_filter(&y, &taps);
    let sxx = valid_filter(&(&x * &x), &taps) - &mx * &mx;
    let syy = valid_filter(&(&y * &y), &taps) - &my * &my;
    let sxy = valid_filter(&(&x * &y), &taps) - &mx * &my;
    let mut acc = 0.0;
    for (((&mx, &my), (&sxx, &syy)), &sxy) in mx.iter().zip(my.iter()).zip(sxx.iter().zip(syy.iter())).zip(sxy.iter()) {
        acc += ((2.0 * mx * my + SSIM_C1) * (2.0 * sxy + SSIM_C2)) / ((mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2));
    }
    Ok(acc / mx.len() as f64)
}

/// Per-pixel CIEDE2000 between two sRGB images.
pub fn ciede2000_map(a: &ColorImage, b: &ColorImage) -> Result<Array2<f64>> {
    a.ensure_same_dim(b)?;
    let (ca, cb) = (a.channels(), b.channels());
    Ok(Array2::from_shape_fn(a.dim(), |(r, k)| {
        let pa = [ca[0][[r, k]], ca[1][[r, k]], ca[2][[r, k]]];
        let pb = [cb[0][[r, k]], cb[1][[r, k]], cb[2][[r, k]]];
        ciede2000(srgb_to_lab(pa), srgb_to_lab(pb))
    }))
}

/// Image-level CIEDE2000 score: the mean of the per-pixel differences.
pub fn mean_ciede2000(a: &ColorImage, b: &ColorImage) -> Result<f64> {
    Ok(ciede2000_map(a, b)?.mean().unwrap_or(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::natural_texture;

    #[test]
    fn psnr_cases() {
        let a = natural_texture(16, 16, 2);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-10);
    }

    #[test]
    fn ssim_cases() {
        let a = natural_texture(20, 20, 5);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!(ssim(&a, &a.map(|v| 1.0 - v)).unwrap() < 1.0);
        let c = ColorImage::from_fn(11, 11, |_, _, _| 0.4);
        let d = c.map(|v| v + 0.1);
        let expected = (2.0 * 0.4 * 0.5 + SSIM_C1) / (0.4f64 * 0.4 + 0.25 + SSIM_C1);
        assert!((ssim(&c, &d).unwrap() - expected).abs() < 1e-9);
        assert!(ssim(&ColorImage::zeros(8, 8), &ColorImage::zeros(8, 8)).is_err());
    }

    #[test]
    fn mean_ciede2000_zero_on_identity() {
        let a = natural_texture(8, 8, 9);
        assert_eq!(mean_ciede2000(&a, &a).unwrap(), 0.0);
        assert!(mean_ciede2000(&a, &a.map(|v| v * 0.5)).unwrap() > 0.0);
    }
}
