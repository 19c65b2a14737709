//! Deterministic synthetic test material: piecewise-smooth color scenes and
//! blur kernels.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::ColorImage;

/// A color scene of overlapping flat shapes on a smooth shaded background,
/// values within `[0.05, 0.95]`.
pub fn natural_texture(rows: usize, cols: usize, seed: u64) -> ColorImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: [[f64; 3]; 3] = std::array::from_fn(|_| std::array::from_fn(|_| rng.random_range(0.2..0.8)));
    let mut planes: [Array2<f64>; 3] = std::array::from_fn(|c| {
        Array2::from_shape_fn((rows, cols), |(r, k)| {
            let y = r as f64 / rows as f64;
            let x = k as f64 / cols as f64;
            base[0][c] * (1.0 - x) * (1.0 - y) + base[1][c] * x + base[2][c] * y * (1.0 - x)
        })
    });
    let shapes = 6 + (rows * cols) / 256;
    for _ in 0..shapes {
        let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.05..0.95));
        let cy = rng.random_range(0.0..rows as f64);
        let cx = rng.random_range(0.0..cols as f64);
        let ry = rng.random_range(2.0..(rows as f64 / 4.0).max(3.0));
        let rx = rng.random_range(2.0..(cols as f64 / 4.0).max(3.0));
        let disk = rng.random_bool(0.5);
        for r in 0..rows {
            for k in 0..cols {
                let dy = (r as f64 - cy) / ry;
                let dx = (k as f64 - cx) / rx;
                let inside = if disk { dx * dx + dy * dy <= 1.0 } else { dx.abs() <= 1.0 && dy.abs() <= 1.0 };
                if inside {
                    for c in 0..3 {
                        planes[c][[r, k]] = color[c];
                    }
                }
            }
        }
    }
    for p in planes.iter_mut() {
        p.mapv_inplace(|v| v.clamp(0.05, 0.95));
    }
    ColorImage::from_channels(planes).expect("consistent planes")
}

/// Normalized isotropic Gaussian on an odd `size x size` grid.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Array2<f64> {
    let c = (size / 2) as f64;
    let k = Array2::from_shape_fn((size, size), |(a, b)| {
        let (y, x) = (a as f64 - c, b as f64 - c);
        (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
    });
    let total = k.sum();
    k / total
}

/// Normalized linear motion blur of the given length (pixels) and angle
/// (radians), rasterized with bilinear splatting and centered in the grid.
pub fn motion_kernel(size: usize, length: f64, angle: f64) -> Array2<f64> {
    let mut k = Array2::<f64>::zeros((size, size));
    let c = (size / 2) as f64;
    let steps = (length * 8.0).ceil().max(1.0) as usize;
    for s in 0..=steps {
        let t = s as f64 / steps as f64 - 0.5;
        let y = c + t * length * angle.sin();
        let x = c + t * length * angle.cos();
        let (y0, x0) = (y.floor(), x.floor());
        let (fy, fx) = (y - y0, x - x0);
        for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
            for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
                let (r, q) = (y0 + dy, x0 + dx);
                if r >= 0.0 && q >= 0.0 && (r as usize) < size && (q as usize) < size {
                    k[[r as usize, q as usize]] += wy * wx;
                }
            }
        }
    }
    let total = k.sum();
    k / total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn texture_is_deterministic_and_in_range() {
        let a = natural_texture(32, 40, 7);
        assert_eq!(a, natural_texture(32, 40, 7));
        assert_ne!(a, natural_texture(32, 40, 8));
        assert!(a.channels().iter().flat_map(|p| p.iter()).all(|v| (0.05..=0.95).contains(v)));
    }

    #[test]
    fn kernels_are_normalized() {
        assert!((gaussian_kernel(7, 1.2).sum() - 1.0).abs() < 1e-12);
        let m = motion_kernel(7, 5.0, 0.3);
        assert!((m.sum() - 1.0).abs() < 1e-12);
        assert!(m.iter().all(|&v| v >= 0.0));
        // symmetric about the center for a line through it
        assert!((m[[3, 3]] - m.iter().copied().fold(0.0, f64::max)).abs() < 0.2);
    }
}
