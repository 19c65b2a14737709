//! Kernel update: Tikhonov-regularized least squares in the gradient domain,
//! solved with conjugate gradient on FFT-applied normal equations restricted
//! to the kernel support.

use ndarray::Array2;
use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fft::{crop_kernel, pad_kernel, Fft2};
use crate::image::{diff_x, diff_y, gradient, ColorImage};
use crate::quat::{QuatImage, QuatKernel, SIGN_PATTERN};

type C = Complex64;

/// Default CG iteration cap.
pub const DEFAULT_CG_ITERS: usize = 50;
/// Default relative residual tolerance for CG.
pub const DEFAULT_CG_TOL: f64 = 1e-6;
/// Default support-cleaning ratio for [`project_kernel`].
pub const DEFAULT_CLIP_RATIO: f64 = 0.05;

/// Outcome of a conjugate-gradient run.
#[derive(Debug, Clone)]
pub struct CgReport {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// `||b - A x_k|| / ||b||` for `k = 0..=iterations`.
    pub residuals: Vec<f64>,
    /// `½ x_kᵀ A x_k - bᵀ x_k` for `k = 0..=iterations`.
    pub objectives: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Plain conjugate gradient from `x = 0` for a symmetric positive definite operator.
pub fn conjugate_gradient(apply: impl Fn(&[f64]) -> Vec<f64>, b: &[f64], max_iters: usize, tol: f64) -> CgReport {
    let n = b.len();
    let b_norm = dot(b, b).sqrt();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let mut residuals = vec![if b_norm > 0.0 { 1.0 } else { 0.0 }];
    let mut objectives = vec![0.0];
    let mut iterations = 0;
    while iterations < max_iters && b_norm > 0.0 && rr.sqrt() > tol * b_norm {
        let ap = apply(&p);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            break;
        }
        let alpha = rr / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_next = dot(&r, &r);
        for i in 0..n {
            p[i] = r[i] + (rr_next / rr) * p[i];
        }
        rr = rr_next;
        iterations += 1;
        residuals.push(rr.sqrt() / b_norm);
        // Ax = b - r, so ½xᵀAx - bᵀx = -½ xᵀ(b + r)
        objectives.push(-0.5 * x.iter().zip(b.iter().zip(&r)).map(|(xi, (bi, ri))| xi * (bi + ri)).sum::<f64>());
    }
    CgReport { x, iterations, residuals, objectives }
}

/// Support-restricted normal operator `A = Σ_d L_dᵀ L_d + γ I` of the
/// quaternion kernel fit, where `L_d` maps a kernel to the color planes of
/// `Q ⊛ ∂_d u`.
#[derive(Debug, Clone)]
pub struct KernelSystem {
    fft: Fft2,
    size: usize,
    gamma: f64,
    /// Spectra of the four planes of `∂_d u` per direction.
    grads: [[Array2<C>; 4]; 2],
    /// First output plane entering the fit: 1 for color-only data, 0 when
    /// the real plane is fitted to zero as well.
    first_plane: usize,
    rhs: Vec<f64>,
}

impl KernelSystem {
    /// Fit of the three color planes of `Q ⊛ ∇u` to `∇f` for a color latent.
    pub fn new(u: &ColorImage, f: &ColorImage, size: usize, gamma: f64) -> Result<Self> {
        check_inputs(u, f, size, gamma)?;
        Self::assemble(&QuatImage::from_color(u), f, size, gamma, 1)
    }

    /// Fit of all four planes of `Q ⊛ ∇u` to `[0; ∇f]` for a latent with a
    /// real plane.
    pub fn with_real_plane(u: &QuatImage, f: &ColorImage, size: usize, gamma: f64) -> Result<Self> {
        check_inputs(&u.to_color(), f, size, gamma)?;
        Self::assemble(u, f, size, gamma, 0)
    }

    fn assemble(u: &QuatImage, f: &ColorImage, size: usize, gamma: f64, first_plane: usize) -> Result<Self> {
        let (rows, cols) = u.dim();
        let fft = Fft2::new(rows, cols);
        let gf = gradient(f)?;
        let zero = Array2::<C>::zeros((rows, cols));
        let grads = [diff_x, diff_y].map(|d| std::array::from_fn(|p| fft.forward(&d(u.part(p)))));
        if grads.iter().flatten().skip(1).all(|p| p.iter().all(|z| z.norm() < 1e-300)) {
            return Err(Error::DegenerateInput("latent image has no gradients".into()));
        }
        let spectra = |planes: &[Array2<f64>; 3]| -> [Array2<C>; 4] {
            [zero.clone(), fft.forward(&planes[0]), fft.forward(&planes[1]), fft.forward(&planes[2])]
        };
        let targets = [spectra(&gf.gx), spectra(&gf.gy)];
        let mut system = Self { fft, size, gamma, grads, first_plane, rhs: Vec::new() };
        system.rhs = system.adjoint(&targets);
        Ok(system)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn rhs(&self) -> &[f64] {
        &self.rhs
    }

    pub fn unknowns(&self) -> usize {
        4 * self.size * self.size
    }

    /// `B_d[p][i]`: coefficient of kernel component `i` in output plane `p`.
    fn coupling(&self, d: usize, r: usize, c: usize) -> [[C; 4]; 4] {
        let mut b = [[C::new(0.0, 0.0); 4]; 4];
        for (p, row) in SIGN_PATTERN.iter().enumerate() {
            for (j, &(comp, sign)) in row.iter().enumerate() {
                b[p][comp] += self.grads[d][j][[r, c]] * sign;
            }
        }
        b
    }

    /// `Σ_d crop(F⁻¹(B_dᴴ Y_d))` for per-direction output spectra `Y_d`.
    fn adjoint(&self, outputs: &[[Array2<C>; 4]; 2]) -> Vec<f64> {
        let (rows, cols) = self.fft.shape();
        let mut acc: [Array2<C>; 4] = std::array::from_fn(|_| Array2::zeros((rows, cols)));
        for (d, out) in outputs.iter().enumerate() {
            for r in 0..rows {
                for c in 0..cols {
                    let b = self.coupling(d, r, c);
                    for (i, plane) in acc.iter_mut().enumerate() {
                        plane[[r, c]] += (self.first_plane..4).map(|p| b[p][i].conj() * out[p][[r, c]]).sum::<C>();
                    }
                }
            }
        }
        let mut x = Vec::with_capacity(self.unknowns());
        for plane in &acc {
            x.extend(crop_kernel(&self.fft.inverse(plane), self.size).iter());
        }
        x
    }

    /// `A x` for a flattened kernel `[q0 | q1 | q2 | q3]` (row-major blocks).
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let (rows, cols) = self.fft.shape();
        let kernel = unflatten(x, self.size);
        let spectra: [Array2<C>; 4] = std::array::from_fn(|i| self.fft.forward(&pad_kernel(&kernel[i], rows, cols)));
        let outputs: [[Array2<C>; 4]; 2] = std::array::from_fn(|d| {
            let mut out: [Array2<C>; 4] = std::array::from_fn(|_| Array2::zeros((rows, cols)));
            for r in 0..rows {
                for c in 0..cols {
                    let b = self.coupling(d, r, c);
                    for (p, plane) in out.iter_mut().enumerate() {
                        plane[[r, c]] = (0..4).map(|i| b[p][i] * spectra[i][[r, c]]).sum();
                    }
                }
            }
            out
        });
        let mut y = self.adjoint(&outputs);
        y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += self.gamma * xi);
        y
    }

    pub fn solve(&self, cg_iters: usize, cg_tol: f64) -> CgReport {
        conjugate_gradient(|x| self.apply(x), &self.rhs, cg_iters, cg_tol)
    }
}

fn check_inputs(u: &ColorImage, f: &ColorImage, size: usize, gamma: f64) -> Result<()> {
    u.ensure_same_dim(f)?;
    let (rows, cols) = u.dim();
    if size % 2 == 0 {
        return Err(Error::InvalidParameter(format!("kernel size {size} must be odd")));
    }
    if size > rows || size > cols {
        return Err(Error::KernelTooLarge { kernel: size, rows, cols });
    }
    if !(gamma > 0.0) {
        return Err(Error::InvalidParameter(format!("gamma must be positive, got {gamma}")));
    }
    Ok(())
}

fn unflatten(x: &[f64], size: usize) -> [Array2<f64>; 4] {
    let n = size * size;
    std::array::from_fn(|i| Array2::from_shape_vec((size, size), x[i * n..(i + 1) * n].to_vec()).expect("shape"))
}

pub fn flatten(k: &QuatKernel) -> Vec<f64> {
    k.parts().iter().flat_map(|p| p.iter().copied()).collect()
}

/// Kernel estimate together with the CG trace.
#[derive(Debug, Clone)]
pub struct KernelEstimate {
    pub kernel: QuatKernel,
    pub cg: CgReport,
}

/// Fit `Q` minimizing `Σ_{d∈{x,y}} ||Q ⊛ ∂_d u - ∂_d f||² + γ||Q||²` over an
/// `size x size` support.
pub fn estimate_kernel(u: &ColorImage, f: &ColorImage, size: usize, gamma: f64, cg_iters: usize, cg_tol: f64) -> Result<QuatKernel> {
    Ok(estimate_kernel_with_report(u, f, size, gamma, cg_iters, cg_tol)?.kernel)
}

pub fn estimate_kernel_with_report(
    u: &ColorImage,
    f: &ColorImage,
    size: usize,
    gamma: f64,
    cg_iters: usize,
    cg_tol: f64,
) -> Result<KernelEstimate> {
    solve_system(&KernelSystem::new(u, f, size, gamma)?, cg_iters, cg_tol)
}

/// [`estimate_kernel_with_report`] for a four-plane latent whose real plane
/// is fitted to zero alongside the color planes.
pub fn estimate_kernel_with_real_plane(
    u: &QuatImage,
    f: &ColorImage,
    size: usize,
    gamma: f64,
    cg_iters: usize,
    cg_tol: f64,
) -> Result<KernelEstimate> {
    solve_system(&KernelSystem::with_real_plane(u, f, size, gamma)?, cg_iters, cg_tol)
}

fn solve_system(system: &KernelSystem, cg_iters: usize, cg_tol: f64) -> Result<KernelEstimate> {
    let cg = system.solve(cg_iters, cg_tol);
    let kernel = QuatKernel::new(unflatten(&cg.x, system.size))?;
    Ok(KernelEstimate { kernel, cg })
}

/// Enforce `q0 >= 0` and drop weak taps: `q0` entries below
/// `clip_ratio · max(q0)` and `q1..q3` entries with magnitude below
/// `clip_ratio · max|q_i|` become zero.
pub fn project_kernel(k: &QuatKernel, clip_ratio: f64) -> Result<QuatKernel> {
    if !(0.0..1.0).contains(&clip_ratio) {
        return Err(Error::InvalidParameter(format!("clip ratio {clip_ratio} not in [0, 1)")));
    }
    let mut parts = k.clone().into_parts();
    parts[0].mapv_inplace(|v| v.max(0.0));
    let peak = parts[0].iter().copied().fold(0.0, f64::max);
    if peak <= 0.0 {
        return Err(Error::EmptyKernel("q0 has no positive entries".into()));
    }
    let floor = clip_ratio * peak;
    parts[0].mapv_inplace(|v| if v < floor { 0.0 } else { v });
    for part in parts.iter_mut().skip(1) {
        let floor = clip_ratio * part.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        part.mapv_inplace(|v| if v.abs() < floor { 0.0 } else { v });
    }
    QuatKernel::new(parts)
}

/// Integer shift of all four components that moves the centroid of `q0`
/// to the center tap. Taps pushed off the support are dropped.
pub fn recenter_kernel(k: &QuatKernel) -> QuatKernel {
    let q0 = k.component(0);
    let mass: f64 = q0.iter().map(|v| v.max(0.0)).sum();
    if !(mass > 0.0) {
        return k.clone();
    }
    let (mut cy, mut cx) = (0.0, 0.0);
    for ((i, j), v) in q0.indexed_iter() {
        cy += i as f64 * v.max(0.0);
        cx += j as f64 * v.max(0.0);
    }
    let c = (k.size() / 2) as f64;
    let dy = (c - cy / mass).round() as isize;
    let dx = (c - cx / mass).round() as isize;
    if dy == 0 && dx == 0 {
        return k.clone();
    }
    let n = k.size() as isize;
    let parts = std::array::from_fn(|p| {
        let src = k.component(p);
        Array2::from_shape_fn(src.dim(), |(i, j)| {
            let (si, sj) = (i as isize - dy, j as isize - dx);
            if (0..n).contains(&si) && (0..n).contains(&sj) {
                src[[si as usize, sj as usize]]
            } else {
                0.0
            }
        })
    });
    QuatKernel::new(parts).expect("same shape")
}

/// Baseline: one real kernel shared by the three channels, fitted in the
/// gradient domain, then clamped to `k >= 0` and scaled to `||k||_1 = 1`.
pub fn estimate_kernel_cck(
    u: &ColorImage,
    f: &ColorImage,
    size: usize,
    gamma: f64,
    cg_iters: usize,
    cg_tol: f64,
) -> Result<Array2<f64>> {
    check_inputs(u, f, size, gamma)?;
    let (rows, cols) = u.dim();
    let fft = Fft2::new(rows, cols);
    let gu = gradient(u)?;
    let gf = gradient(f)?;
    let mut energy = Array2::<f64>::zeros((rows, cols));
    let mut cross = Array2::<C>::zeros((rows, cols));
    for (us, fs) in [(&gu.gx, &gf.gx), (&gu.gy, &gf.gy)] {
        for c in 0..3 {
            let uu = fft.forward(&us[c]);
            let ff = fft.forward(&fs[c]);
            ndarray::Zip::from(&mut energy).and(&mut cross).and(&uu).and(&ff).for_each(|e, x, &a, &b| {
                *e += a.norm_sqr();
                *x += a.conj() * b;
            });
        }
    }
    if energy.iter().all(|&e| e < 1e-300) {
        return Err(Error::DegenerateInput("latent image has no gradients".into()));
    }
    let rhs: Vec<f64> = crop_kernel(&fft.inverse(&cross), size).iter().copied().collect();
    let apply = |x: &[f64]| -> Vec<f64> {
        let k = Array2::from_shape_vec((size, size), x.to_vec()).expect("shape");
        let spec = fft.forward(&pad_kernel(&k, rows, cols)) * &energy.mapv(|e| C::new(e, 0.0));
        crop_kernel(&fft.inverse(&spec), size)
            .iter()
            .zip(x)
            .map(|(a, xi)| a + gamma * xi)
            .collect()
    };
    let cg = conjugate_gradient(apply, &rhs, cg_iters, cg_tol);
    let mut k = Array2::from_shape_vec((size, size), cg.x).expect("shape");
    k.mapv_inplace(|v| v.max(0.0));
    let total = k.sum();
    if total <= 0.0 {
        return Err(Error::EmptyKernel("baseline kernel has no positive entries".into()));
    }
    Ok(k / total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quat::{qconv_fft, QuatImage};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> ColorImage {
        let vals: Vec<f64> = (0..3 * rows * cols).map(|_| rng.random::<f64>()).collect();
        ColorImage::from_fn(rows, cols, |c, r, k| vals[(c * rows + r) * cols + k])
    }

    #[test]
    fn operator_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = random_image(&mut rng, 12, 10);
        let sys = KernelSystem::new(&u, &u, 3, 0.5).unwrap();
        let x: Vec<f64> = (0..sys.unknowns()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..sys.unknowns()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lhs = dot(&sys.apply(&x), &y);
        let rhs = dot(&x, &sys.apply(&y));
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn real_plane_operator_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = random_image(&mut rng, 12, 10);
        let u0 = Array2::from_shape_fn((12, 10), |_| rng.random_range(-0.5..0.5));
        let [_, r, g, b] = QuatImage::from_color(&u).into_parts();
        let q = QuatImage::new([u0, r, g, b]).unwrap();
        let sys = KernelSystem::with_real_plane(&q, &u, 3, 0.5).unwrap();
        let x: Vec<f64> = (0..sys.unknowns()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..sys.unknowns()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lhs = dot(&sys.apply(&x), &y);
        let rhs = dot(&x, &sys.apply(&y));
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn real_plane_fit_recovers_real_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let u = random_image(&mut rng, 20, 20);
        let g = Array2::from_shape_fn((3, 3), |(a, b)| 1.0 + (a * 3 + b) as f64 * 0.1);
        let truth = QuatKernel::from_real(&g / g.sum()).unwrap();
        let qu = QuatImage::from_color(&u);
        let f = qconv_fft(&truth, &qu).unwrap().to_color();
        let est = estimate_kernel_with_real_plane(&qu, &f, 3, 1e-10, 400, 1e-14).unwrap();
        for i in 0..4 {
            let err = (est.kernel.component(i) - truth.component(i)).iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            assert!(err < 1e-6, "component {i}: {err}");
        }
    }

    #[test]
    fn unblurred_pair_gives_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u = random_image(&mut rng, 16, 16);
        let k = estimate_kernel(&u, &u, 5, 1e-9, 200, 1e-12).unwrap();
        let fit = qconv_fft(&k, &QuatImage::from_color(&u)).unwrap();
        let err = (0..3)
            .map(|c| (fit.part(c + 1) - u.channel(c)).mapv(|v| v.abs()).iter().copied().fold(0.0, f64::max))
            .fold(0.0, f64::max);
        assert!(err <= 1e-6, "{err}");
        assert!((k.component(0)[[2, 2]] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn flat_latent_is_degenerate() {
        let u = ColorImage::from_fn(8, 8, |_, _, _| 0.4);
        assert!(matches!(estimate_kernel(&u, &u, 3, 1.0, 10, 1e-6), Err(Error::DegenerateInput(_))));
        assert!(matches!(estimate_kernel_cck(&u, &u, 3, 1.0, 10, 1e-6), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn cg_objective_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = random_image(&mut rng, 16, 16);
        let f = random_image(&mut rng, 16, 16);
        let est = estimate_kernel_with_report(&u, &f, 5, 0.1, 50, 1e-12).unwrap();
        assert!(est.cg.objectives.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }

    #[test]
    fn projection_keeps_nonnegative_kernel() {
        let k = QuatKernel::from_real(Array2::from_shape_fn((3, 3), |(a, b)| (a + b) as f64 + 1.0)).unwrap();
        assert_eq!(project_kernel(&k, 0.0).unwrap(), k);
    }

    #[test]
    fn projection_zeroes_negative_q0() {
        let mut k = QuatKernel::identity(3);
        k.component_mut(0)[[0, 1]] = -0.1;
        let p = project_kernel(&k, 0.0).unwrap();
        assert_eq!(p.component(0)[[0, 1]], 0.0);
        assert_eq!(p.component(0)[[1, 1]], 1.0);
    }

    #[test]
    fn projection_removes_noise_floor() {
        let gauss = Array2::from_shape_fn((7, 7), |(a, b)| {
            let (x, y) = (a as f64 - 3.0, b as f64 - 3.0);
            (-(x * x + y * y) / 2.0).exp()
        });
        let noisy = &gauss + 1e-6;
        let p = project_kernel(&QuatKernel::from_real(noisy).unwrap(), 0.05).unwrap();
        for ((a, b), &v) in gauss.indexed_iter() {
            if v < 0.05 {
                assert_eq!(p.component(0)[[a, b]], 0.0);
            } else {
                assert!((p.component(0)[[a, b]] - v - 1e-6).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn projection_of_nonpositive_q0_is_empty() {
        let k = QuatKernel::from_real(Array2::from_elem((3, 3), -1.0)).unwrap();
        assert!(matches!(project_kernel(&k, 0.05), Err(Error::EmptyKernel(_))));
        assert!(project_kernel(&QuatKernel::identity(3), 1.0).is_err());
    }

    #[test]
    fn cck_recovers_delta_and_gaussian() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let u = random_image(&mut rng, 24, 24);
        let delta = estimate_kernel_cck(&u, &u, 5, 1e-8, 200, 1e-12).unwrap();
        assert!((delta[[2, 2]] - 1.0).abs() < 1e-6);
        assert!((delta.sum() - 1.0).abs() < 1e-12);

        let g = Array2::from_shape_fn((5, 5), |(a, b)| {
            let (x, y) = (a as f64 - 2.0, b as f64 - 2.0);
            (-(x * x + y * y) / 2.0).exp()
        });
        let g = &g / g.sum();
        let blurred = qconv_fft(&QuatKernel::from_real(g.clone()).unwrap(), &QuatImage::from_color(&u))
            .unwrap()
            .to_color();
        let est = estimate_kernel_cck(&u, &blurred, 5, 1e-8, 300, 1e-13).unwrap();
        assert!((est.sum() - 1.0).abs() < 1e-12);
        let err = (&est - &g).mapv(|v| v * v).sum().sqrt() / g.mapv(|v| v * v).sum().sqrt();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn recenter_moves_q0_mass_to_center() {
        let mut k = QuatKernel::zeros(5);
        k.component_mut(0)[[0, 3]] = 0.6;
        k.component_mut(0)[[0, 4]] = 0.4;
        k.component_mut(2)[[1, 3]] = -0.1;
        let r = recenter_kernel(&k);
        assert_eq!(r.component(0)[[2, 2]], 0.6);
        assert_eq!(r.component(0)[[2, 3]], 0.4);
        assert_eq!(r.component(2)[[3, 2]], -0.1);
        let centered = QuatKernel::identity(5);
        assert_eq!(recenter_kernel(&centered), centered);
    }
}
