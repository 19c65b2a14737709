//! Spatial CIELAB error maps.

use nalgebra::Matrix3;
use ndarray::Array2;
use serde::Serialize;

use super::color::{cie76, srgb_to_xyz, xyz_to_lab};
use crate::error::{Error, Result};
use crate::image::{separable_filter, ColorImage};

pub const DEFAULT_PPD: f64 = 23.0;
pub const DEFAULT_THRESHOLD: f64 = 5.0;

const XYZ_TO_OPP: [[f64; 3]; 3] = [
    [0.279, 0.72, -0.107],
    [-0.449, 0.29, -0.077],
    [0.086, -0.59, 0.501],
];

/// (weights, spreads in degrees) per opponent channel.
const FILTERS: [(&[f64], &[f64]); 3] = [
    (&[1.00327, 0.114416, -0.117686], &[0.05, 0.225, 7.0]),
    (&[0.616725, 0.383275], &[0.0685, 0.826]),
    (&[0.567885, 0.432115], &[0.0920, 0.6451]),
];

#[derive(Clone, Debug, Serialize)]
pub struct ErrorMap {
    #[serde(skip)]
    pub delta_e: Array2<f64>,
    pub exceed_count: usize,
    pub mean_de: f64,
    pub threshold: f64,
}

impl ErrorMap {
    pub fn from_delta_e(delta_e: Array2<f64>, threshold: f64) -> Self {
        let exceed_count = delta_e.iter().filter(|&&d| d > threshold).count();
        let mean_de = delta_e.mean().unwrap_or(0.0);
        Self { delta_e, exceed_count, mean_de, threshold }
    }

    pub fn with_threshold(&self, threshold: f64) -> Self {
        Self::from_delta_e(self.delta_e.clone(), threshold)
    }

    pub fn sum(&self) -> f64 {
        self.delta_e.sum()
    }

    /// Grayscale rendering of the error field (white at twice the threshold)
    /// with exceeding pixels painted green.
    pub fn heatmap(&self) -> ColorImage {
        let (rows, cols) = self.delta_e.dim();
        let span = 2.0 * self.threshold.max(f64::EPSILON);
        ColorImage::from_fn(rows, cols, |c, r, k| {
            let d = self.delta_e[[r, k]];
            if d > self.threshold {
                [0.0, 1.0, 0.0][c]
            } else {
                (d / span).min(1.0)
            }
        })
    }
}

fn gaussian_taps(sigma: f64, half: usize) -> Vec<f64> {
    let taps: Vec<f64> = (0..=2 * half)
        .map(|i| {
            let x = i as f64 - half as f64;
            (-(x * x) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

fn spatial_filter(plane: &Array2<f64>, weights: &[f64], spreads: &[f64], ppd: f64) -> Array2<f64> {
    let half = (ppd / 2.0).ceil() as usize;
    let wsum: f64 = weights.iter().sum();
    let mut out = Array2::<f64>::zeros(plane.dim());
    for (&w, &s) in weights.iter().zip(spreads) {
        let taps = gaussian_taps(s * ppd, half);
        out.scaled_add(w / wsum, &separable_filter(plane, &taps, &taps));
    }
    out
}

fn lab_planes(xyz: &[Array2<f64>; 3]) -> [Array2<f64>; 3] {
    let (rows, cols) = xyz[0].dim();
    let mut out = std::array::from_fn(|_| Array2::<f64>::zeros((rows, cols)));
    for r in 0..rows {
        for k in 0..cols {
            let lab = xyz_to_lab([xyz[0][[r, k]], xyz[1][[r, k]], xyz[2][[r, k]]]);
            for c in 0..3 {
                out[c][[r, k]] = lab[c];
            }
        }
    }
    out
}

fn filtered_lab(img: &ColorImage, ppd: f64) -> [Array2<f64>; 3] {
    let (rows, cols) = img.dim();
    let ch = img.channels();
    let mut opp: [Array2<f64>; 3] = std::array::from_fn(|_| Array2::zeros((rows, cols)));
    for r in 0..rows {
        for k in 0..cols {
            let xyz = srgb_to_xyz([ch[0][[r, k]], ch[1][[r, k]], ch[2][[r, k]]]);
            for (o, row) in opp.iter_mut().zip(XYZ_TO_OPP) {
                o[[r, k]] = row[0] * xyz[0] + row[1] * xyz[1] + row[2] * xyz[2];
            }
        }
    }
    let filtered: [Array2<f64>; 3] = std::array::from_fn(|c| spatial_filter(&opp[c], FILTERS[c].0, FILTERS[c].1, ppd));
    let inv = Matrix3::from_fn(|i, j| XYZ_TO_OPP[i][j]).try_inverse().expect("opponent transform is invertible");
    let xyz: [Array2<f64>; 3] = std::array::from_fn(|i| {
        let mut p = Array2::<f64>::zeros((rows, cols));
        for j in 0..3 {
            p.scaled_add(inv[(i, j)], &filtered[j]);
        }
        p
    });
    lab_planes(&xyz)
}

/// Per-pixel S-CIELAB difference between `reference` and `test` viewed at
/// `ppd` pixels per degree, summarized at the default threshold.
pub fn scielab_map(reference: &ColorImage, test: &ColorImage, ppd: f64) -> Result<ErrorMap> {
    reference.ensure_same_dim(test)?;
    if !(ppd > 0.0 && ppd.is_finite()) {
        return Err(Error::InvalidParameter(format!("ppd must be positive, got {ppd}")));
    }
    let a = filtered_lab(reference, ppd);
    let b = filtered_lab(test, ppd);
    let delta_e = Array2::from_shape_fn(reference.dim(), |(r, k)| {
        cie76([a[0][[r, k]], a[1][[r, k]], a[2][[r, k]]], [b[0][[r, k]], b[1][[r, k]], b[2][[r, k]]])
    });
    Ok(ErrorMap::from_delta_e(delta_e, DEFAULT_THRESHOLD))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::color::srgb_to_lab;
    use crate::synth::natural_texture;

    #[test]
    fn identical_images_have_zero_error() {
        let a = natural_texture(24, 20, 1);
        let m = scielab_map(&a, &a, DEFAULT_PPD).unwrap();
        assert!(m.delta_e.iter().all(|&d| d == 0.0));
        assert_eq!(m.exceed_count, 0);
    }

    #[test]
    fn constant_shift_matches_pointwise_difference() {
        let base = [0.3, 0.5, 0.2];
        let a = ColorImage::from_fn(16, 16, |c, _, _| base[c]);
        let b = a.map(|v| v + 0.2);
        let m = scielab_map(&a, &b, DEFAULT_PPD).unwrap();
        let expected = cie76(srgb_to_lab(base), srgb_to_lab(base.map(|v| v + 0.2)));
        assert!(m.delta_e.iter().all(|&d| (d - expected).abs() < 1e-9));
        assert_eq!(m.exceed_count, 256);
    }

    #[test]
    fn filters_preserve_constants() {
        let p = Array2::from_elem((9, 9), 0.7);
        for (w, s) in FILTERS {
            let out = spatial_filter(&p, w, s, DEFAULT_PPD);
            assert!(out.iter().all(|&v| (v - 0.7).abs() < 1e-12));
        }
    }

    #[test]
    fn exceedance_is_monotone_in_threshold() {
        let a = natural_texture(24, 24, 3);
        let b = natural_texture(24, 24, 4);
        let m = scielab_map(&a, &b, DEFAULT_PPD).unwrap();
        let counts: Vec<usize> = [0.0, 1.0, 2.5, 5.0, 10.0, 40.0].iter().map(|&t| m.with_threshold(t).exceed_count).collect();
        assert!(counts.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn heatmap_marks_exceeding_pixels_green() {
        let d = Array2::from_shape_vec((1, 2), vec![1.0, 6.0]).unwrap();
        let h = ErrorMap::from_delta_e(d, 5.0).heatmap();
        assert_eq!(h.channel(1)[[0, 1]], 1.0);
        assert_eq!(h.channel(0)[[0, 1]], 0.0);
        assert!((h.channel(0)[[0, 0]] - 0.1).abs() < 1e-12);
    }
}
