//! Quaternion kernels, quaternion-valued images and the left-multiplication
//! convolution `Q ⊛ u`.
//!
//! Component `p` of `Q ⊛ u` is `Σ_j s(p, j) · (Q_{c(p, j)} ⋆ u_j)` where the
//! component index `c` and sign `s` follow the real 4x4 embedding of a
//! quaternion:
//!
//! ```text
//! [ Q0 -Q1 -Q2 -Q3 ]
//! [ Q1  Q0 -Q3  Q2 ]
//! [ Q2  Q3  Q0 -Q1 ]
//! [ Q3 -Q2  Q1  Q0 ]
//! ```
//!
//! `⋆` is true convolution (flipped kernel); kernels are odd-sized with the
//! origin at their geometric center.

use nalgebra::DMatrix;
use ndarray::Array2;
use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fft::{pad_kernel, Fft2};
use crate::image::ColorImage;

/// `SIGN_PATTERN[p][j] = (component, sign)` of the real embedding.
pub const SIGN_PATTERN: [[(usize, f64); 4]; 4] = [
    [(0, 1.0), (1, -1.0), (2, -1.0), (3, -1.0)],
    [(1, 1.0), (0, 1.0), (3, -1.0), (2, 1.0)],
    [(2, 1.0), (3, 1.0), (0, 1.0), (1, -1.0)],
    [(3, 1.0), (2, -1.0), (1, 1.0), (0, 1.0)],
];

/// Boundary handling for the spatial convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    Periodic,
    /// Replicate-pad, convolve, crop back.
    Replicate,
}

/// `Q = Q0 + Q1 i + Q2 j + Q3 k` with four `s x s` real components, `s` odd.
#[derive(Debug, Clone, PartialEq)]
pub struct QuatKernel {
    parts: [Array2<f64>; 4],
}

impl QuatKernel {
    pub fn new(parts: [Array2<f64>; 4]) -> Result<Self> {
        let (r, c) = parts[0].dim();
        if r != c || r % 2 == 0 {
            return Err(Error::InvalidParameter(format!("kernel must be square and odd-sized, got {r}x{c}")));
        }
        for p in &parts[1..] {
            if p.dim() != (r, c) {
                return Err(Error::DimensionMismatch { expected: (r, c), got: p.dim() });
            }
        }
        if parts.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidParameter("kernel contains non-finite values".into()));
        }
        Ok(Self { parts })
    }

    pub fn zeros(size: usize) -> Self {
        assert!(size % 2 == 1, "kernel size must be odd");
        Self {
            parts: std::array::from_fn(|_| Array2::zeros((size, size))),
        }
    }

    /// `(δ, 0, 0, 0)`
    pub fn identity(size: usize) -> Self {
        let mut k = Self::zeros(size);
        k.parts[0][[size / 2, size / 2]] = 1.0;
        k
    }

    /// Kernel whose only nonzero component is `component`, a centered delta.
    pub fn unit(size: usize, component: usize) -> Self {
        let mut k = Self::zeros(size);
        k.parts[component][[size / 2, size / 2]] = 1.0;
        k
    }

    /// Real kernel lifted to `(k, 0, 0, 0)`.
    pub fn from_real(k: Array2<f64>) -> Result<Self> {
        let dim = k.dim();
        Self::new([k, Array2::zeros(dim), Array2::zeros(dim), Array2::zeros(dim)])
    }

    pub fn size(&self) -> usize {
        self.parts[0].nrows()
    }

    pub fn component(&self, i: usize) -> &Array2<f64> {
        &self.parts[i]
    }

    pub fn component_mut(&mut self, i: usize) -> &mut Array2<f64> {
        &mut self.parts[i]
    }

    pub fn parts(&self) -> &[Array2<f64>; 4] {
        &self.parts
    }

    pub fn into_parts(self) -> [Array2<f64>; 4] {
        self.parts
    }

    pub fn scaled(&self, factors: [f64; 4]) -> Self {
        Self {
            parts: std::array::from_fn(|i| &self.parts[i] * factors[i]),
        }
    }

    /// Embed into a larger odd size, keeping the center.
    pub fn embed(&self, size: usize) -> Result<Self> {
        let s = self.size();
        if size < s || size % 2 == 0 {
            return Err(Error::InvalidParameter(format!("cannot embed {s}x{s} kernel in {size}x{size}")));
        }
        let off = (size - s) / 2;
        let mut out = Self::zeros(size);
        for i in 0..4 {
            out.parts[i]
                .slice_mut(ndarray::s![off..off + s, off..off + s])
                .assign(&self.parts[i]);
        }
        Ok(out)
    }

    pub fn norms(&self) -> QuatNorms {
        qnorms(&self.parts)
    }
}

/// A quaternion-valued image; a color image lifts to `(0, r, g, b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuatImage {
    parts: [Array2<f64>; 4],
}

impl QuatImage {
    pub fn new(parts: [Array2<f64>; 4]) -> Result<Self> {
        let dim = parts[0].dim();
        for p in &parts[1..] {
            if p.dim() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: p.dim() });
            }
        }
        Ok(Self { parts })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            parts: std::array::from_fn(|_| Array2::zeros((rows, cols))),
        }
    }

    /// Pure-imaginary lift of a color image.
    pub fn from_color(img: &ColorImage) -> Self {
        let (rows, cols) = img.dim();
        Self {
            parts: [
                Array2::zeros((rows, cols)),
                img.channel(0).clone(),
                img.channel(1).clone(),
                img.channel(2).clone(),
            ],
        }
    }

    /// Drop the real part.
    pub fn to_color(&self) -> ColorImage {
        ColorImage::from_channels([self.parts[1].clone(), self.parts[2].clone(), self.parts[3].clone()])
            .expect("planes share dimensions")
    }

    pub fn dim(&self) -> (usize, usize) {
        self.parts[0].dim()
    }

    pub fn part(&self, i: usize) -> &Array2<f64> {
        &self.parts[i]
    }

    pub fn parts(&self) -> &[Array2<f64>; 4] {
        &self.parts
    }

    pub fn into_parts(self) -> [Array2<f64>; 4] {
        self.parts
    }

    /// Column-major vectorization, plane after plane: `idx = p·N + i + m·j`.
    pub fn to_vec(&self) -> Vec<f64> {
        let (m, n) = self.dim();
        let mut out = Vec::with_capacity(4 * m * n);
        for p in &self.parts {
            for j in 0..n {
                for i in 0..m {
                    out.push(p[[i, j]]);
                }
            }
        }
        out
    }

    pub fn from_vec(rows: usize, cols: usize, data: &[f64]) -> Result<Self> {
        let n = rows * cols;
        if data.len() != 4 * n {
            return Err(Error::InvalidParameter(format!("expected {} values, got {}", 4 * n, data.len())));
        }
        Ok(Self {
            parts: std::array::from_fn(|p| Array2::from_shape_fn((rows, cols), |(i, j)| data[p * n + i + rows * j])),
        })
    }

    pub fn max_abs(&self) -> f64 {
        self.parts.iter().flat_map(|p| p.iter()).fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn norms(&self) -> QuatNorms {
        qnorms(&self.parts)
    }
}

fn check_fits(k: &QuatKernel, u: &QuatImage) -> Result<()> {
    let (rows, cols) = u.dim();
    if k.size() > rows || k.size() > cols {
        return Err(Error::KernelTooLarge { kernel: k.size(), rows, cols });
    }
    Ok(())
}

/// Spatial-domain real convolution of one plane.
pub fn conv2(kernel: &Array2<f64>, plane: &Array2<f64>, boundary: Boundary) -> Array2<f64> {
    let (rows, cols) = plane.dim();
    let s = kernel.nrows() as isize;
    let c = s / 2;
    let index = |v: isize, n: usize| -> usize {
        match boundary {
            Boundary::Periodic => v.rem_euclid(n as isize) as usize,
            Boundary::Replicate => v.clamp(0, n as isize - 1) as usize,
        }
    };
    Array2::from_shape_fn((rows, cols), |(x, y)| {
        let mut acc = 0.0;
        for a in 0..s {
            let src_r = index(x as isize - (a - c), rows);
            for b in 0..s {
                let w = kernel[[a as usize, b as usize]];
                if w != 0.0 {
                    acc += w * plane[[src_r, index(y as isize - (b - c), cols)]];
                }
            }
        }
        acc
    })
}

/// Quaternion convolution `Q ⊛ u` evaluated directly in the spatial domain.
pub fn qconv(k: &QuatKernel, u: &QuatImage, boundary: Boundary) -> Result<QuatImage> {
    check_fits(k, u)?;
    let (rows, cols) = u.dim();
    // all 16 single-kernel convolutions, indexed [component][plane]
    let mut cache: Vec<Option<Array2<f64>>> = vec![None; 16];
    let mut out: [Array2<f64>; 4] = std::array::from_fn(|_| Array2::zeros((rows, cols)));
    for (p, row) in SIGN_PATTERN.iter().enumerate() {
        for (j, &(comp, sign)) in row.iter().enumerate() {
            let kc = k.component(comp);
            if kc.iter().all(|&v| v == 0.0) || u.part(j).iter().all(|&v| v == 0.0) {
                continue;
            }
            let conv = cache[comp * 4 + j].get_or_insert_with(|| conv2(kc, u.part(j), boundary));
            out[p].scaled_add(sign, conv);
        }
    }
    QuatImage::new(out)
}

/// Fourier transforms of the four zero-padded kernel components.
pub(crate) fn kernel_spectra(k: &QuatKernel, fft: &Fft2) -> [Array2<Complex64>; 4] {
    let (rows, cols) = fft.shape();
    std::array::from_fn(|i| fft.forward(&pad_kernel(k.component(i), rows, cols)))
}

/// Combine component spectra `K` with plane spectra `U` through the 4x4 sign
/// pattern: `out_p = Σ_j s(p, j) K_{c(p, j)} U_j` per frequency.
pub(crate) fn combine_spectra(kern: &[Array2<Complex64>; 4], planes: &[Array2<Complex64>; 4]) -> [Array2<Complex64>; 4] {
    let dim = kern[0].dim();
    std::array::from_fn(|p| {
        let mut acc = Array2::<Complex64>::zeros(dim);
        for (j, &(comp, sign)) in SIGN_PATTERN[p].iter().enumerate() {
            ndarray::Zip::from(&mut acc)
                .and(&kern[comp])
                .and(&planes[j])
                .for_each(|a, &kv, &uv| *a += kv * uv * sign);
        }
        acc
    })
}

/// Periodic quaternion convolution through the block-circulant diagonalization.
pub fn qconv_fft(k: &QuatKernel, u: &QuatImage) -> Result<QuatImage> {
    check_fits(k, u)?;
    let (rows, cols) = u.dim();
    let fft = Fft2::new(rows, cols);
    let kern = kernel_spectra(k, &fft);
    let planes: [Array2<Complex64>; 4] = std::array::from_fn(|j| fft.forward(u.part(j)));
    let out = combine_spectra(&kern, &planes);
    QuatImage::new(out.map(|s| fft.inverse(&s)))
}

/// The conjugate kernel for the adjoint: `(flip Q0, -flip Q1, -flip Q2, -flip Q3)`.
pub fn adjoint_kernel(k: &QuatKernel) -> QuatKernel {
    let flip = |p: &Array2<f64>| {
        let mut f = p.clone();
        f.invert_axis(ndarray::Axis(0));
        f.invert_axis(ndarray::Axis(1));
        f
    };
    QuatKernel {
        parts: std::array::from_fn(|i| if i == 0 { flip(&k.parts[0]) } else { -flip(&k.parts[i]) }),
    }
}

/// `T_Q^T u` under periodic boundary conditions.
pub fn qconv_adjoint(k: &QuatKernel, u: &QuatImage) -> Result<QuatImage> {
    qconv_fft(&adjoint_kernel(k), u)
}

/// Dense real matrix of a periodic quaternion convolution acting on
/// [`QuatImage::to_vec`] vectors.
#[derive(Debug, Clone)]
pub struct RealifiedOperator {
    pub rows: usize,
    pub cols: usize,
    pub matrix: DMatrix<f64>,
}

impl RealifiedOperator {
    pub fn apply(&self, u: &QuatImage) -> Result<QuatImage> {
        if u.dim() != (self.rows, self.cols) {
            return Err(Error::DimensionMismatch { expected: (self.rows, self.cols), got: u.dim() });
        }
        let v = nalgebra::DVector::from_vec(u.to_vec());
        let out = &self.matrix * v;
        QuatImage::from_vec(self.rows, self.cols, out.as_slice())
    }
}

/// Largest `rows * cols` accepted by [`realify`].
pub const DENSE_PIXEL_LIMIT: usize = 4096;

/// Dense `N x N` periodic convolution matrix of one real kernel (column-major vec).
pub fn convolution_matrix(kernel: &Array2<f64>, rows: usize, cols: usize) -> DMatrix<f64> {
    let n = rows * cols;
    let s = kernel.nrows() as isize;
    let c = s / 2;
    let mut t = DMatrix::<f64>::zeros(n, n);
    for x in 0..rows {
        for y in 0..cols {
            let out_idx = x + rows * y;
            for a in 0..s {
                for b in 0..s {
                    let src_r = (x as isize - (a - c)).rem_euclid(rows as isize) as usize;
                    let src_c = (y as isize - (b - c)).rem_euclid(cols as isize) as usize;
                    t[(out_idx, src_r + rows * src_c)] += kernel[[a as usize, b as usize]];
                }
            }
        }
    }
    t
}

/// Assemble the `4N x 4N` block matrix `T_Q` of the periodic convolution.
pub fn realify(k: &QuatKernel, rows: usize, cols: usize) -> Result<RealifiedOperator> {
    let n = rows * cols;
    if n > DENSE_PIXEL_LIMIT {
        return Err(Error::TooLargeForDense { pixels: n, limit: DENSE_PIXEL_LIMIT });
    }
    if k.size() > rows || k.size() > cols {
        return Err(Error::KernelTooLarge { kernel: k.size(), rows, cols });
    }
    let blocks: [DMatrix<f64>; 4] = std::array::from_fn(|i| convolution_matrix(k.component(i), rows, cols));
    let mut matrix = DMatrix::<f64>::zeros(4 * n, 4 * n);
    for (p, row) in SIGN_PATTERN.iter().enumerate() {
        for (j, &(comp, sign)) in row.iter().enumerate() {
            matrix.view_mut((p * n, j * n), (n, n)).copy_from(&(&blocks[comp] * sign));
        }
    }
    Ok(RealifiedOperator { rows, cols, matrix })
}

/// The real embedding of a quaternion matrix (the kernel taken as an
/// `s x s` quaternion matrix, not as an operator): a `4s x 4s` real matrix.
pub fn realify_matrix(k: &QuatKernel) -> DMatrix<f64> {
    let s = k.size();
    let mut m = DMatrix::<f64>::zeros(4 * s, 4 * s);
    for (p, row) in SIGN_PATTERN.iter().enumerate() {
        for (j, &(comp, sign)) in row.iter().enumerate() {
            for a in 0..s {
                for b in 0..s {
                    m[(p * s + a, j * s + b)] = sign * k.component(comp)[[a, b]];
                }
            }
        }
    }
    m
}

/// Entrywise norms of a quaternion array.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuatNorms {
    /// Sum of absolute values of all real entries of all four components.
    pub l1: f64,
    /// 2-norm of the array read as a quaternion vector (sum of squared moduli, rooted).
    pub l2: f64,
    /// Frobenius norm of the array read as a quaternion matrix; equal to `l2`.
    pub frobenius: f64,
}

pub fn qnorms(parts: &[Array2<f64>; 4]) -> QuatNorms {
    let l1 = parts.iter().flat_map(|p| p.iter()).map(|v| v.abs()).sum();
    let sq: f64 = parts.iter().flat_map(|p| p.iter()).map(|v| v * v).sum();
    QuatNorms { l1, l2: sq.sqrt(), frobenius: sq.sqrt() }
}
