//! Latent-image update: L0-gradient half-quadratic splitting with a
//! Fourier-diagonalized quaternion data term.
//!
//! With periodic boundaries every block of the normal matrix
//! `T_Q^T T_Q + β (D_x^T D_x + D_y^T D_y)` is block-circulant, so after a 2-D
//! DFT the system splits into one independent 4x4 complex system per
//! frequency.

use ndarray::Array2;
use rayon::prelude::*;
use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fft::Fft2;
use crate::image::{diff_x, diff_x_adjoint, diff_y, diff_y_adjoint, gradient, ColorImage, GradientField};
use crate::quat::{kernel_spectra, qconv_fft, QuatImage, QuatKernel, SIGN_PATTERN};

type C = Complex64;
pub type Block = [[C; 4]; 4];

/// State of the splitting iteration.
#[derive(Debug, Clone)]
pub struct HqsState {
    pub u: ColorImage,
    pub v: GradientField,
    pub beta: f64,
    pub lambda: f64,
}

/// Channel-shared hard threshold of a gradient field: a pixel keeps its
/// gradients in every channel when `mean_c(gx² + gy²) >= λ/β`, otherwise all
/// are zeroed.
pub fn threshold_field(g: &GradientField, lambda: f64, beta: f64) -> GradientField {
    let (rows, cols) = g.dim();
    let cutoff = lambda / beta;
    let mut out = GradientField::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            let score = (0..3)
                .map(|c| g.gx[c][[i, j]].powi(2) + g.gy[c][[i, j]].powi(2))
                .sum::<f64>()
                / 3.0;
            if score >= cutoff {
                for c in 0..3 {
                    out.gx[c][[i, j]] = g.gx[c][[i, j]];
                    out.gy[c][[i, j]] = g.gy[c][[i, j]];
                }
            }
        }
    }
    out
}

/// The `v`-step of the splitting.
pub fn threshold_gradients(u: &ColorImage, lambda: f64, beta: f64) -> Result<GradientField> {
    if !(lambda > 0.0 && beta > 0.0) {
        return Err(Error::InvalidParameter(format!("lambda ({lambda}) and beta ({beta}) must be positive")));
    }
    Ok(threshold_field(&gradient(u)?, lambda, beta))
}

/// Per-frequency 4x4 systems of the `u`-step.
///
/// Blocks are formed on demand from the kernel spectra so that memory stays
/// linear in the number of pixels.
#[derive(Debug, Clone)]
pub struct FourierSystem {
    rows: usize,
    cols: usize,
    beta: f64,
    kernel: [Array2<C>; 4],
    /// `|F(d_x)|² + |F(d_y)|²`
    laplacian: Array2<f64>,
    rhs: [Array2<C>; 4],
}

impl FourierSystem {
    pub fn dim(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// `F(Re Q)` at one frequency.
    pub fn kernel_matrix(&self, r: usize, c: usize) -> Block {
        let mut m = [[C::new(0.0, 0.0); 4]; 4];
        for (p, row) in SIGN_PATTERN.iter().enumerate() {
            for (j, &(comp, sign)) in row.iter().enumerate() {
                m[p][j] = self.kernel[comp][[r, c]] * sign;
            }
        }
        m
    }

    /// `Λ = F(Re Q)^H F(Re Q) + β (|F(d_x)|² + |F(d_y)|²) I`
    pub fn block(&self, r: usize, c: usize) -> Block {
        let m = self.kernel_matrix(r, c);
        let mut out = [[C::new(0.0, 0.0); 4]; 4];
        for (p, out_row) in out.iter_mut().enumerate() {
            for (q, entry) in out_row.iter_mut().enumerate() {
                *entry = (0..4).map(|t| m[t][p].conj() * m[t][q]).sum();
            }
            out_row[p] += self.beta * self.laplacian[[r, c]];
        }
        out
    }

    /// Largest diagonal magnitude over all blocks; pivots are judged against it.
    pub fn scale(&self) -> f64 {
        let kernel_energy = (0..self.rows * self.cols)
            .map(|idx| {
                let (r, c) = (idx / self.cols, idx % self.cols);
                self.kernel.iter().map(|k| k[[r, c]].norm_sqr()).sum::<f64>()
            })
            .fold(0.0, f64::max);
        let lap = self.laplacian.iter().copied().fold(0.0, f64::max);
        kernel_energy + self.beta * lap
    }

    pub fn rhs(&self, r: usize, c: usize) -> [C; 4] {
        std::array::from_fn(|p| self.rhs[p][[r, c]])
    }
}

/// Spectra shared by every inner iteration of one latent solve.
struct SpectralContext {
    fft: Fft2,
    kernel: [Array2<C>; 4],
    data: [Array2<C>; 3],
    dx: Array2<C>,
    dy: Array2<C>,
    laplacian: Array2<f64>,
}

impl SpectralContext {
    fn new(k: &QuatKernel, f: &ColorImage) -> Result<Self> {
        let (rows, cols) = f.dim();
        if k.size() > rows || k.size() > cols {
            return Err(Error::KernelTooLarge { kernel: k.size(), rows, cols });
        }
        if rows < 2 || cols < 2 {
            return Err(Error::DegenerateDimension(rows.min(cols)));
        }
        let fft = Fft2::new(rows, cols);
        let kernel = kernel_spectra(k, &fft);
        let data = std::array::from_fn(|c| fft.forward(f.channel(c)));
        let mut delta = Array2::zeros((rows, cols));
        delta[[0, 0]] = 1.0;
        let dx = fft.forward(&diff_x(&delta));
        let dy = fft.forward(&diff_y(&delta));
        let laplacian = Array2::from_shape_fn((rows, cols), |(r, c)| dx[[r, c]].norm_sqr() + dy[[r, c]].norm_sqr());
        Ok(Self { fft, kernel, data, dx, dy, laplacian })
    }

    fn system(&self, v: &GradientField, beta: f64) -> Result<FourierSystem> {
        let (rows, cols) = self.fft.shape();
        if v.dim() != (rows, cols) {
            return Err(Error::DimensionMismatch { expected: (rows, cols), got: v.dim() });
        }
        let zero = Array2::<C>::zeros((rows, cols));
        let data: [Array2<C>; 4] = [zero.clone(), self.data[0].clone(), self.data[1].clone(), self.data[2].clone()];
        let mut rhs: [Array2<C>; 4] = std::array::from_fn(|_| zero.clone());
        // F(Re Q)^H [0; F(f)]: entry (j, p) of the adjoint is conj(M[p][j])
        for (p, row) in SIGN_PATTERN.iter().enumerate().skip(1) {
            for (j, &(comp, sign)) in row.iter().enumerate() {
                ndarray::Zip::from(&mut rhs[j])
                    .and(&self.kernel[comp])
                    .and(&data[p])
                    .for_each(|acc, &kv, &fv| *acc += kv.conj() * fv * sign);
            }
        }
        if beta != 0.0 {
            for c in 0..3 {
                let vx = self.fft.forward(&v.gx[c]);
                let vy = self.fft.forward(&v.gy[c]);
                ndarray::Zip::from(&mut rhs[c + 1])
                    .and(&vx)
                    .and(&vy)
                    .and(&self.dx)
                    .and(&self.dy)
                    .for_each(|acc, &x, &y, &dx, &dy| *acc += (dx.conj() * x + dy.conj() * y) * beta);
            }
        }
        Ok(FourierSystem {
            rows,
            cols,
            beta,
            kernel: self.kernel.clone(),
            laplacian: self.laplacian.clone(),
            rhs,
        })
    }
}

/// Assemble the per-frequency normal equations of the `u`-step.
pub fn build_fourier_system(k: &QuatKernel, f: &ColorImage, v: &GradientField, beta: f64) -> Result<FourierSystem> {
    if beta < 0.0 {
        return Err(Error::InvalidParameter(format!("beta must be non-negative, got {beta}")));
    }
    SpectralContext::new(k, f)?.system(v, beta)
}

/// Gaussian elimination with partial pivoting on one 4x4 complex system.
/// Returns `None` when a pivot magnitude is at or below `tol`.
pub fn solve_block(a: &Block, b: &[C; 4], tol: f64) -> Option<[C; 4]> {
    let mut m = *a;
    let mut x = *b;
    for col in 0..4 {
        let pivot = (col..4)
            .max_by(|&i, &j| m[i][col].norm().total_cmp(&m[j][col].norm()))
            .unwrap();
        if m[pivot][col].norm() <= tol {
            return None;
        }
        m.swap(col, pivot);
        x.swap(col, pivot);
        let inv = m[col][col].inv();
        for row in col + 1..4 {
            let factor = m[row][col] * inv;
            if factor == C::new(0.0, 0.0) {
                continue;
            }
            for k in col..4 {
                let sub = factor * m[col][k];
                m[row][k] -= sub;
            }
            let sub = factor * x[col];
            x[row] -= sub;
        }
    }
    for col in (0..4).rev() {
        let mut acc = x[col];
        for k in col + 1..4 {
            acc -= m[col][k] * x[k];
        }
        x[col] = acc / m[col][col];
    }
    Some(x)
}

/// Result of one Fourier solve: all four planes. Plane 0 (the real part) is
/// not part of the color image and is kept for diagnostics only.
#[derive(Debug, Clone)]
pub struct FourierSolution {
    pub planes: QuatImage,
}

impl FourierSolution {
    pub fn color(&self) -> ColorImage {
        self.planes.to_color()
    }

    /// Root-mean-square of the real-part plane.
    pub fn real_part_rms(&self) -> f64 {
        let p = self.planes.part(0);
        (p.iter().map(|v| v * v).sum::<f64>() / p.len() as f64).sqrt()
    }
}

/// Solve every per-frequency system and transform back.
pub fn solve_fourier_system(sys: &FourierSystem) -> Result<FourierSolution> {
    let (rows, cols) = sys.dim();
    let tol = 1e-13 * sys.scale();
    let solved: Vec<[C; 4]> = (0..rows * cols)
        .into_par_iter()
        .map(|idx| {
            let (r, c) = (idx / cols, idx % cols);
            solve_block(&sys.block(r, c), &sys.rhs(r, c), tol).ok_or(Error::SingularBlock { row: r, col: c })
        })
        .collect::<Result<_>>()?;
    let fft = Fft2::new(rows, cols);
    let planes: [Array2<f64>; 4] = std::array::from_fn(|p| {
        let spectrum = Array2::from_shape_fn((rows, cols), |(r, c)| solved[r * cols + c][p]);
        fft.inverse(&spectrum)
    });
    Ok(FourierSolution { planes: QuatImage::new(planes)? })
}

/// Diagnostics of a latent solve.
#[derive(Debug, Clone)]
pub struct LatentSolve {
    pub image: ColorImage,
    /// Penalty weight used at each inner iteration.
    pub betas: Vec<f64>,
    /// Real plane of the last Fourier solve.
    pub real_part: Array2<f64>,
    /// Real-part magnitude of the last Fourier solve.
    pub real_part_rms: f64,
    /// Pixel sites with a nonzero thresholded gradient in the last step.
    pub gradient_support: usize,
}

impl LatentSolve {
    pub fn iterations(&self) -> usize {
        self.betas.len()
    }
}

/// Solve `min_u ||Q ⊛ u - f||² + λ ||∇u||_0` by half-quadratic splitting,
/// doubling `β` from `beta0` while it stays below `beta_max`.
pub fn solve_latent(f: &ColorImage, k: &QuatKernel, lambda: f64, beta0: f64, beta_max: f64) -> Result<ColorImage> {
    Ok(solve_latent_with_stats(f, k, lambda, beta0, beta_max)?.image)
}

pub fn solve_latent_with_stats(
    f: &ColorImage,
    k: &QuatKernel,
    lambda: f64,
    beta0: f64,
    beta_max: f64,
) -> Result<LatentSolve> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidParameter(format!("lambda must be positive, got {lambda}")));
    }
    if !(beta0 > 0.0 && beta0 <= beta_max) {
        return Err(Error::InvalidParameter(format!("need 0 < beta0 ({beta0}) <= beta_max ({beta_max})")));
    }
    let ctx = SpectralContext::new(k, f)?;
    let mut u = f.clone();
    let mut beta = beta0;
    let mut betas = Vec::new();
    let mut real_part = Array2::zeros(f.dim());
    let mut real_part_rms = 0.0;
    let mut gradient_support = 0;
    while beta < beta_max {
        let v = threshold_gradients(&u, lambda, beta)?;
        gradient_support = l0_count(&v);
        let solution = solve_fourier_system(&ctx.system(&v, beta)?)?;
        real_part_rms = solution.real_part_rms();
        u = solution.color();
        real_part = solution.planes.into_parts()[0].clone();
        betas.push(beta);
        beta *= 2.0;
    }
    Ok(LatentSolve { image: u, betas, real_part, real_part_rms, gradient_support })
}

/// Number of pixel sites where any channel/direction of `v` is nonzero.
pub fn l0_count(v: &GradientField) -> usize {
    let (rows, cols) = v.dim();
    (0..rows * cols)
        .filter(|idx| {
            let (i, j) = (idx / cols, idx % cols);
            (0..3).any(|c| v.gx[c][[i, j]] != 0.0 || v.gy[c][[i, j]] != 0.0)
        })
        .count()
}

/// Splitting objective `||T_Q u - [0; f]||² + λ||v||_0 + β||∇u - v||²`
/// for a four-plane `u` (its real plane is penalized like the others).
pub fn hqs_objective(k: &QuatKernel, u: &QuatImage, f: &ColorImage, v: &GradientField, lambda: f64, beta: f64) -> Result<f64> {
    let fit = fidelity(k, u, f)?;
    let mut coupling = 0.0;
    for p in 0..4 {
        let gx = diff_x(u.part(p));
        let gy = diff_y(u.part(p));
        if p == 0 {
            coupling += gx.mapv(|x| x * x).sum() + gy.mapv(|x| x * x).sum();
        } else {
            coupling += (&gx - &v.gx[p - 1]).mapv(|x| x * x).sum();
            coupling += (&gy - &v.gy[p - 1]).mapv(|x| x * x).sum();
        }
    }
    Ok(fit + lambda * l0_count(v) as f64 + beta * coupling)
}

/// `||Q ⊛ u - [0; f]||²` over all four planes.
pub fn fidelity(k: &QuatKernel, u: &QuatImage, f: &ColorImage) -> Result<f64> {
    let blurred = qconv_fft(k, u)?;
    let mut acc = blurred.part(0).mapv(|x| x * x).sum();
    for c in 0..3 {
        acc += (blurred.part(c + 1) - f.channel(c)).mapv(|x| x * x).sum();
    }
    Ok(acc)
}

/// Residual of the `u`-step normal equations evaluated spatially:
/// `(T_Q^T T_Q + β D^T D) u - T_Q^T [0; f] - β D^T [0; v]`.
pub fn normal_equation_residual(k: &QuatKernel, u: &QuatImage, f: &ColorImage, v: &GradientField, beta: f64) -> Result<(f64, f64)> {
    use crate::quat::qconv_adjoint;
    let (rows, cols) = u.dim();
    let lhs_data = qconv_adjoint(k, &qconv_fft(k, u)?)?;
    let data = QuatImage::from_color(f);
    let rhs_data = qconv_adjoint(k, &data)?;
    let mut res_sq = 0.0;
    let mut rhs_sq = 0.0;
    for p in 0..4 {
        let smooth = diff_x_adjoint(&diff_x(u.part(p))) + diff_y_adjoint(&diff_y(u.part(p)));
        let lhs = lhs_data.part(p) + &(smooth * beta);
        let mut rhs = rhs_data.part(p).clone();
        if p > 0 {
            rhs = rhs + (diff_x_adjoint(&v.gx[p - 1]) + diff_y_adjoint(&v.gy[p - 1])) * beta;
        }
        res_sq += (&lhs - &rhs).mapv(|x| x * x).sum();
        rhs_sq += rhs.mapv(|x| x * x).sum();
    }
    debug_assert_eq!((rows, cols), f.dim());
    Ok((res_sq.sqrt(), rhs_sq.sqrt()))
}
