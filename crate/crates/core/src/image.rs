//! Color image container, periodic finite differences, resampling and the
//! coarse-to-fine pyramid.

use ndarray::{Array2, Zip};

use crate::error::{Error, Result};
use crate::quat::QuatKernel;

/// An RGB image with one `f64` plane per channel, nominally in `[0, 1]`.
///
/// Solver iterates are allowed to leave the unit range; clamping happens
/// only when the image is written out.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorImage {
    channels: [Array2<f64>; 3],
}

impl ColorImage {
    pub fn new(r: Array2<f64>, g: Array2<f64>, b: Array2<f64>) -> Result<Self> {
        let dim = r.dim();
        for plane in [&g, &b] {
            if plane.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: plane.dim(),
                });
            }
        }
        if [&r, &g, &b].iter().any(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidParameter("image contains non-finite values".into()));
        }
        Ok(Self { channels: [r, g, b] })
    }

    pub fn from_channels(channels: [Array2<f64>; 3]) -> Result<Self> {
        let [r, g, b] = channels;
        Self::new(r, g, b)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            channels: std::array::from_fn(|_| Array2::zeros((rows, cols))),
        }
    }

    /// Build an image from `f(channel, row, col)`.
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        Self {
            channels: std::array::from_fn(|c| Array2::from_shape_fn((rows, cols), |(r, k)| f(c, r, k))),
        }
    }

    /// `(rows, cols)`
    pub fn dim(&self) -> (usize, usize) {
        self.channels[0].dim()
    }

    pub fn channel(&self, c: usize) -> &Array2<f64> {
        &self.channels[c]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut Array2<f64> {
        &mut self.channels[c]
    }

    pub fn channels(&self) -> &[Array2<f64>; 3] {
        &self.channels
    }

    pub fn into_channels(self) -> [Array2<f64>; 3] {
        self.channels
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            channels: std::array::from_fn(|c| self.channels[c].mapv(&f)),
        }
    }

    pub fn clamped(&self) -> Self {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn scaled(&self, factor: f64) -> Self {
        self.map(|v| v * factor)
    }

    /// Sum of absolute values of one channel.
    pub fn channel_l1(&self, c: usize) -> f64 {
        self.channels[c].iter().map(|v| v.abs()).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.channels
            .iter()
            .flat_map(|p| p.iter())
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn ensure_same_dim(&self, other: &ColorImage) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        Ok(())
    }

    /// Copy the window starting at `(top, left)` with the given size.
    pub fn crop(&self, top: usize, left: usize, rows: usize, cols: usize) -> ColorImage {
        ColorImage {
            channels: std::array::from_fn(|c| {
                self.channels[c]
                    .slice(ndarray::s![top..top + rows, left..left + cols])
                    .to_owned()
            }),
        }
    }
}

/// Horizontal and vertical forward differences, per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientField {
    pub gx: [Array2<f64>; 3],
    pub gy: [Array2<f64>; 3],
}

impl GradientField {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            gx: std::array::from_fn(|_| Array2::zeros((rows, cols))),
            gy: std::array::from_fn(|_| Array2::zeros((rows, cols))),
        }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.gx[0].dim()
    }

    /// Inner product summed over both directions and all channels.
    pub fn dot(&self, other: &GradientField) -> f64 {
        let mut acc = 0.0;
        for c in 0..3 {
            acc += (&self.gx[c] * &other.gx[c]).sum();
            acc += (&self.gy[c] * &other.gy[c]).sum();
        }
        acc
    }
}

/// `out[i, j] = p[i, (j + 1) mod n] - p[i, j]`
pub fn diff_x(plane: &Array2<f64>) -> Array2<f64> {
    let (rows, cols) = plane.dim();
    Array2::from_shape_fn((rows, cols), |(i, j)| plane[[i, (j + 1) % cols]] - plane[[i, j]])
}

/// `out[i, j] = p[(i + 1) mod m, j] - p[i, j]`
pub fn diff_y(plane: &Array2<f64>) -> Array2<f64> {
    let (rows, cols) = plane.dim();
    Array2::from_shape_fn((rows, cols), |(i, j)| plane[[(i + 1) % rows, j]] - plane[[i, j]])
}

/// Transpose of [`diff_x`].
pub fn diff_x_adjoint(plane: &Array2<f64>) -> Array2<f64> {
    let (rows, cols) = plane.dim();
    Array2::from_shape_fn((rows, cols), |(i, j)| plane[[i, (j + cols - 1) % cols]] - plane[[i, j]])
}

/// Transpose of [`diff_y`].
pub fn diff_y_adjoint(plane: &Array2<f64>) -> Array2<f64> {
    let (rows, cols) = plane.dim();
    Array2::from_shape_fn((rows, cols), |(i, j)| plane[[(i + rows - 1) % rows, j]] - plane[[i, j]])
}

/// Periodic forward-difference gradient of every channel.
pub fn gradient(u: &ColorImage) -> Result<GradientField> {
    let (rows, cols) = u.dim();
    if rows < 2 {
        return Err(Error::DegenerateDimension(rows));
    }
    if cols < 2 {
        return Err(Error::DegenerateDimension(cols));
    }
    Ok(GradientField {
        gx: std::array::from_fn(|c| diff_x(u.channel(c))),
        gy: std::array::from_fn(|c| diff_y(u.channel(c))),
    })
}

/// The exact adjoint of [`gradient`]: `<grad u, g> = <u, divergence_adjoint(g)>`.
pub fn divergence_adjoint(g: &GradientField) -> Result<ColorImage> {
    let dim = g.dim();
    for p in g.gx.iter().chain(g.gy.iter()) {
        if p.dim() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: p.dim() });
        }
    }
    Ok(ColorImage {
        channels: std::array::from_fn(|c| diff_x_adjoint(&g.gx[c]) + diff_y_adjoint(&g.gy[c])),
    })
}

/// Round to the nearest odd integer (ties toward the larger one).
pub fn round_to_odd(x: f64) -> usize {
    let half = ((x - 1.0) / 2.0).round().max(0.0);
    2 * half as usize + 1
}

#[derive(Debug, Clone)]
pub struct PyramidLevel {
    pub image: ColorImage,
    pub kernel_size: usize,
}

/// Coarse-to-fine pyramid; `levels[0]` is the coarsest, the last level is
/// the input image itself.
#[derive(Debug, Clone)]
pub struct Pyramid {
    pub levels: Vec<PyramidLevel>,
    pub scale: f64,
}

impl Pyramid {
    pub fn kernel_sizes(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.kernel_size).collect()
    }
}

/// Kernel sizes from coarsest to finest for the given schedule.
pub fn pyramid_kernel_sizes(kernel_size: usize, scale: f64, min_kernel: usize) -> Result<Vec<usize>> {
    if !(scale > 0.0 && scale < 1.0) {
        return Err(Error::InvalidParameter(format!("pyramid scale {scale} not in (0, 1)")));
    }
    if min_kernel < 3 || min_kernel % 2 == 0 {
        return Err(Error::InvalidParameter(format!("min kernel {min_kernel} must be odd and >= 3")));
    }
    if kernel_size % 2 == 0 || kernel_size < min_kernel {
        return Err(Error::InvalidParameter(format!(
            "kernel size {kernel_size} must be odd and >= {min_kernel}"
        )));
    }
    let mut sizes = vec![kernel_size];
    let mut k = 1;
    while *sizes.last().unwrap() > min_kernel {
        let s = round_to_odd(kernel_size as f64 * scale.powi(k)).max(min_kernel);
        sizes.push(s);
        k += 1;
    }
    sizes.reverse();
    Ok(sizes)
}

/// Build the image pyramid for coarse-to-fine kernel estimation.
///
/// Every level must be at least twice its kernel size along each axis.
pub fn build_pyramid(f: &ColorImage, kernel_size: usize, scale: f64, min_kernel: usize) -> Result<Pyramid> {
    let sizes = pyramid_kernel_sizes(kernel_size, scale, min_kernel)?;
    let (rows, cols) = f.dim();
    let count = sizes.len();
    let mut levels = Vec::with_capacity(count);
    for (l, &ks) in sizes.iter().enumerate() {
        let depth = (count - 1 - l) as i32;
        let image = if depth == 0 {
            f.clone()
        } else {
            let factor = scale.powi(depth);
            let r = ((rows as f64 * factor).round() as usize).max(1);
            let c = ((cols as f64 * factor).round() as usize).max(1);
            downsample(f, r, c, factor)
        };
        let (r, c) = image.dim();
        if r < 2 * ks || c < 2 * ks {
            return Err(Error::KernelTooLarge { kernel: ks, rows: r, cols: c });
        }
        levels.push(PyramidLevel { image, kernel_size: ks });
    }
    Ok(Pyramid { levels, scale })
}

/// Gaussian anti-alias prefilter followed by bilinear resampling.
pub fn downsample(f: &ColorImage, rows: usize, cols: usize, factor: f64) -> ColorImage {
    let sigma = if factor < 1.0 { 0.5 * (1.0 / (factor * factor) - 1.0).sqrt() } else { 0.0 };
    ColorImage {
        channels: std::array::from_fn(|c| {
            let smooth = gaussian_blur(f.channel(c), sigma);
            resize_bilinear(&smooth, rows, cols)
        }),
    }
}

/// Separable Gaussian blur with replicated borders. `sigma <= 0` is a no-op.
pub fn gaussian_blur(plane: &Array2<f64>, sigma: f64) -> Array2<f64> {
    if sigma <= 0.0 {
        return plane.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= total);
    separable_filter(plane, &taps, &taps)
}

/// Apply a 1-D correlation filter along columns then rows, replicating borders.
pub(crate) fn separable_filter(plane: &Array2<f64>, taps_x: &[f64], taps_y: &[f64]) -> Array2<f64> {
    let (rows, cols) = plane.dim();
    let rx = (taps_x.len() / 2) as isize;
    let ry = (taps_y.len() / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let horiz = Array2::from_shape_fn((rows, cols), |(i, j)| {
        taps_x
            .iter()
            .enumerate()
            .map(|(t, w)| w * plane[[i, clamp(j as isize + t as isize - rx, cols)]])
            .sum::<f64>()
    });
    Array2::from_shape_fn((rows, cols), |(i, j)| {
        taps_y
            .iter()
            .enumerate()
            .map(|(t, w)| w * horiz[[clamp(i as isize + t as isize - ry, rows), j]])
            .sum::<f64>()
    })
}

/// Pixel-center aligned bilinear resize with clamped borders.
pub fn resize_bilinear(plane: &Array2<f64>, rows: usize, cols: usize) -> Array2<f64> {
    let (src_rows, src_cols) = plane.dim();
    if (rows, cols) == (src_rows, src_cols) {
        return plane.clone();
    }
    let sy = src_rows as f64 / rows as f64;
    let sx = src_cols as f64 / cols as f64;
    let sample = |pos: f64, n: usize| -> (usize, usize, f64) {
        let p = pos.clamp(0.0, (n - 1) as f64);
        let lo = p.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        (lo, hi, p - lo as f64)
    };
    Array2::from_shape_fn((rows, cols), |(i, j)| {
        let (y0, y1, fy) = sample((i as f64 + 0.5) * sy - 0.5, src_rows);
        let (x0, x1, fx) = sample((j as f64 + 0.5) * sx - 0.5, src_cols);
        let top = plane[[y0, x0]] * (1.0 - fx) + plane[[y0, x1]] * fx;
        let bottom = plane[[y1, x0]] * (1.0 - fx) + plane[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Bilinearly resize every kernel component to `new_size`.
///
/// All four components share one gain chosen so that the sum of `q0` is
/// preserved; the relative weighting between components is unchanged.
pub fn upsample_kernel(k: &QuatKernel, new_size: usize) -> Result<QuatKernel> {
    let size = k.size();
    if new_size < size || new_size % 2 == 0 {
        return Err(Error::InvalidParameter(format!(
            "cannot resize a {size}x{size} kernel to {new_size}x{new_size}"
        )));
    }
    if new_size == size {
        return Ok(k.clone());
    }
    let resized: [Array2<f64>; 4] =
        std::array::from_fn(|i| resize_bilinear(k.component(i), new_size, new_size));
    let old_sum = k.component(0).sum();
    let new_sum = resized[0].sum();
    let gain = if old_sum.abs() > 1e-300 && new_sum.abs() > 1e-300 {
        old_sum / new_sum
    } else {
        (size * size) as f64 / (new_size * new_size) as f64
    };
    QuatKernel::new(resized.map(|p| p * gain))
}

/// Replicate-pad by `width` on every side, then blend the padded band with a
/// raised-cosine ramp toward the opposite edge so the result is close to
/// periodic. Use [`ColorImage::crop`] with offset `width` to undo.
pub fn pad_with_taper(img: &ColorImage, width: usize) -> ColorImage {
    if width == 0 {
        return img.clone();
    }
    ColorImage {
        channels: std::array::from_fn(|c| {
            let horiz = taper_axis(img.channel(c), width);
            taper_axis(&horiz.t().to_owned(), width).t().to_owned()
        }),
    }
}

/// Pad along columns: `width` new columns on each side forming a smooth
/// seam from the last column back to the first one.
fn taper_axis(plane: &Array2<f64>, width: usize) -> Array2<f64> {
    let (rows, cols) = plane.dim();
    let band = 2 * width;
    let mut out = Array2::zeros((rows, cols + band));
    out.slice_mut(ndarray::s![.., width..width + cols]).assign(plane);
    for p in 0..band {
        let t = (p + 1) as f64 / (band + 1) as f64;
        let w = 0.5 * (1.0 - (std::f64::consts::PI * t).cos());
        // seam position p sits right after the last column, wrapping into the left pad
        let dest = (width + cols + p) % (cols + band);
        for i in 0..rows {
            out[[i, dest]] = (1.0 - w) * plane[[i, cols - 1]] + w * plane[[i, 0]];
        }
    }
    out
}

/// Mean-squared difference; helper used by diagnostics and tests.
pub fn mse(a: &ColorImage, b: &ColorImage) -> Result<f64> {
    a.ensure_same_dim(b)?;
    let (rows, cols) = a.dim();
    let mut acc = 0.0;
    for c in 0..3 {
        Zip::from(a.channel(c)).and(b.channel(c)).for_each(|x, y| acc += (x - y) * (x - y));
    }
    Ok(acc / (3 * rows * cols) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rows: usize, cols: usize, seed: u64) -> ColorImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vals: Vec<f64> = (0..3 * rows * cols).map(|_| rng.random::<f64>()).collect();
        ColorImage::from_fn(rows, cols, |c, r, k| vals[(c * rows + r) * cols + k])
    }

    fn random_field(rows: usize, cols: usize, seed: u64) -> GradientField {
        let a = random_image(rows, cols, seed);
        let b = random_image(rows, cols, seed + 1);
        GradientField {
            gx: a.into_channels(),
            gy: b.into_channels(),
        }
    }

    #[test]
    fn constant_image_has_zero_gradient() {
        let g = gradient(&ColorImage::from_fn(4, 5, |c, _, _| 0.3 + c as f64 * 0.1)).unwrap();
        assert!(g.gx.iter().chain(g.gy.iter()).all(|p| p.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn step_image_gradient_hits_step_and_seam() {
        // columns 0..2 dark, 2..4 bright
        let img = ColorImage::from_fn(3, 4, |_, _, k| if k < 2 { 0.0 } else { 1.0 });
        let g = gradient(&img).unwrap();
        for i in 0..3 {
            assert_eq!(g.gx[0].row(i).to_vec(), vec![0.0, 1.0, 0.0, -1.0]);
        }
        assert!(g.gy[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_matches_kronecker_oracle() {
        // column-major vec: D_y = I_n (x) d_m, D_x = d_n (x) I_m
        let (m, n) = (5, 5);
        let img = random_image(m, n, 3);
        let d = |size: usize| {
            let mut mat = nalgebra::DMatrix::<f64>::zeros(size, size);
            for i in 0..size {
                mat[(i, i)] = -1.0;
                mat[(i, (i + 1) % size)] = 1.0;
            }
            mat
        };
        let dy = nalgebra::DMatrix::<f64>::identity(n, n).kronecker(&d(m));
        let dx = d(n).kronecker(&nalgebra::DMatrix::<f64>::identity(m, m));
        let g = gradient(&img).unwrap();
        for c in 0..3 {
            let vec_u = nalgebra::DVector::from_fn(m * n, |idx, _| img.channel(c)[[idx % m, idx / m]]);
            let gx = &dx * &vec_u;
            let gy = &dy * &vec_u;
            for idx in 0..m * n {
                assert!((gx[idx] - g.gx[c][[idx % m, idx / m]]).abs() < 1e-14);
                assert!((gy[idx] - g.gy[c][[idx % m, idx / m]]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn one_pixel_dimension_is_rejected() {
        assert!(matches!(gradient(&ColorImage::zeros(1, 4)), Err(Error::DegenerateDimension(1))));
    }

    #[test]
    fn adjoint_identity_holds() {
        for seed in 0..5 {
            let u = random_image(4, 4, seed);
            let g = random_field(4, 4, seed + 100);
            let lhs = gradient(&u).unwrap().dot(&g);
            let div = divergence_adjoint(&g).unwrap();
            let rhs: f64 = (0..3).map(|c| (u.channel(c) * div.channel(c)).sum()).sum();
            assert!((lhs - rhs).abs() < 1e-12, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn adjoint_of_zero_is_zero() {
        let out = divergence_adjoint(&GradientField::zeros(3, 3)).unwrap();
        assert_eq!(out, ColorImage::zeros(3, 3));
    }

    #[test]
    fn adjoint_of_delta_is_two_pixel_pattern() {
        let mut g = GradientField::zeros(3, 4);
        g.gx[1][[1, 0]] = 1.0;
        let out = divergence_adjoint(&g).unwrap();
        let plane = out.channel(1);
        assert_eq!(plane[[1, 0]], -1.0);
        // row k of the forward difference has -1 at k and +1 at k + 1
        assert_eq!(plane[[1, 1]], 1.0);
        assert_eq!(plane.iter().filter(|v| **v != 0.0).count(), 2);
    }

    #[test]
    fn round_to_odd_examples() {
        assert_eq!(round_to_odd(3.0), 3);
        assert_eq!(round_to_odd(3.5), 3);
        assert_eq!(round_to_odd(4.95), 5);
        assert_eq!(round_to_odd(17.68), 17);
        assert_eq!(round_to_odd(0.2), 1);
    }

    #[test]
    fn pyramid_sizes_for_25() {
        let sizes = pyramid_kernel_sizes(25, std::f64::consts::FRAC_1_SQRT_2, 3).unwrap();
        assert_eq!(sizes, vec![3, 5, 7, 9, 13, 17, 25]);
    }

    #[test]
    fn pyramid_single_level_for_min_kernel() {
        let img = random_image(16, 16, 1);
        let p = build_pyramid(&img, 3, std::f64::consts::FRAC_1_SQRT_2, 3).unwrap();
        assert_eq!(p.levels.len(), 1);
        assert_eq!(p.levels[0].image, img);
    }

    #[test]
    fn pyramid_levels_shrink_and_finest_is_input() {
        let img = random_image(64, 48, 2);
        let p = build_pyramid(&img, 7, std::f64::consts::FRAC_1_SQRT_2, 3).unwrap();
        assert_eq!(p.kernel_sizes(), vec![3, 5, 7]);
        assert_eq!(p.levels[2].image, img);
        assert_eq!(p.levels[1].image.dim(), (45, 34));
        assert_eq!(p.levels[0].image.dim(), (32, 24));
    }

    #[test]
    fn pyramid_rejects_oversized_kernel() {
        let img = random_image(64, 64, 3);
        assert!(matches!(
            build_pyramid(&img, 63, std::f64::consts::FRAC_1_SQRT_2, 3),
            Err(Error::KernelTooLarge { .. })
        ));
    }

    #[test]
    fn pyramid_rejects_bad_parameters() {
        let img = random_image(32, 32, 3);
        assert!(build_pyramid(&img, 8, 0.5, 3).is_err());
        assert!(build_pyramid(&img, 7, 1.0, 3).is_err());
        assert!(build_pyramid(&img, 7, 0.5, 2).is_err());
        assert!(build_pyramid(&img, 3, 0.5, 5).is_err());
    }

    #[test]
    fn smooth_image_survives_down_and_up_sampling() {
        let img = ColorImage::from_fn(64, 64, |c, r, k| {
            0.5 + 0.3 * ((r as f64 / 9.0 + c as f64).sin() * (k as f64 / 11.0).cos())
        });
        let small = downsample(&img, 45, 45, 45.0 / 64.0);
        let back = ColorImage::from_channels(std::array::from_fn(|c| resize_bilinear(small.channel(c), 64, 64))).unwrap();
        let num: f64 = (0..3).map(|c| (img.channel(c) - back.channel(c)).mapv(|v| v * v).sum()).sum();
        let den: f64 = (0..3).map(|c| img.channel(c).mapv(|v| v * v).sum()).sum();
        assert!((num / den).sqrt() <= 0.1);
    }

    #[test]
    fn upsample_kernel_same_size_is_identity() {
        let k = QuatKernel::identity(3);
        assert_eq!(upsample_kernel(&k, 3).unwrap(), k);
    }

    #[test]
    fn upsample_delta_keeps_mass_at_center() {
        let k = QuatKernel::identity(3);
        let up = upsample_kernel(&k, 5).unwrap();
        let q0 = up.component(0);
        assert!((q0.sum() - 1.0).abs() <= 0.02);
        let center = q0[[2, 2]];
        assert!(q0.iter().all(|&v| v <= center));
        for i in 1..4 {
            assert!(up.component(i).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn taper_pads_and_crops_back() {
        let img = random_image(6, 7, 4);
        let padded = pad_with_taper(&img, 2);
        assert_eq!(padded.dim(), (10, 11));
        assert_eq!(padded.crop(2, 2, 6, 7), img);
        // seam is continuous across the periodic wrap: neighbours differ less than the edge jump
        let p = padded.channel(0);
        let edge_jump = (img.channel(0)[[3, 6]] - img.channel(0)[[3, 0]]).abs();
        for j in 0..11 {
            let d = (p[[5, (j + 1) % 11]] - p[[5, j]]).abs();
            if !(2..8).contains(&j) {
                assert!(d <= edge_jump + 1e-12);
            }
        }
    }
}
