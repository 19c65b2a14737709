//! Channel-balancing normalization of a quaternion kernel.
//!
//! A scale vector `t` is chosen so that the per-channel L1 norms of
//! `(t0 Q0 + t1 Q1 i + t2 Q2 j + t3 Q3 k) ⊛ u` match those of the observed
//! image. Each convolution term contributes its signed L1 norm, giving a 3x4
//! linear system solved by the Moore–Penrose pseudoinverse.

use nalgebra::{Matrix3x4, Vector3, Vector4};
use ndarray::Array2;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fft::{pad_kernel, Fft2};
use crate::image::ColorImage;
use crate::quat::QuatKernel;

/// Singular values below this fraction of the largest are treated as zero.
pub const PINV_CUTOFF: f64 = 1e-12;

/// Per-component kernel scales `(t0, t1, t2, t3)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScaleVector(pub [f64; 4]);

impl ScaleVector {
    pub const ONES: ScaleVector = ScaleVector([1.0; 4]);

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// `A t = rhs` with `A` built from signed L1 norms of single-kernel convolutions.
#[derive(Debug, Clone, PartialEq)]
pub struct NormSystem {
    pub a: [[f64; 4]; 3],
    pub rhs: [f64; 3],
}

impl NormSystem {
    pub fn matrix(&self) -> Matrix3x4<f64> {
        Matrix3x4::from_fn(|r, c| self.a[r][c])
    }

    pub fn residual(&self, t: &ScaleVector) -> f64 {
        let r = self.matrix() * Vector4::from(t.0) - Vector3::from(self.rhs);
        r.norm()
    }
}

/// L1 norms `||Q_i ⋆ u_c||_1` for all components `i` and channels `c`
/// (periodic boundary, same as the data term).
pub fn convolution_l1_table(k: &QuatKernel, u: &ColorImage) -> Result<[[f64; 3]; 4]> {
    let (rows, cols) = u.dim();
    if k.size() > rows || k.size() > cols {
        return Err(Error::KernelTooLarge { kernel: k.size(), rows, cols });
    }
    let fft = Fft2::new(rows, cols);
    let channels: Vec<_> = (0..3).map(|c| fft.forward(u.channel(c))).collect();
    let mut table = [[0.0; 3]; 4];
    for (i, row) in table.iter_mut().enumerate() {
        let kc = k.component(i);
        if kc.iter().all(|&v| v == 0.0) {
            continue;
        }
        let spec = fft.forward(&pad_kernel(kc, rows, cols));
        for (c, entry) in row.iter_mut().enumerate() {
            let conv: Array2<f64> = fft.inverse(&(&spec * &channels[c]));
            *entry = conv.iter().map(|v| v.abs()).sum();
        }
    }
    Ok(table)
}

/// Assemble the normalization system for kernel `k`, latent `u`, observation `f`.
///
/// Row `c` collects the terms of output channel `c` of `Q ⊛ u`; entries carry
/// the signs of those terms and the zero pattern
///
/// ```text
/// [ |Q0*u1|   0        |Q2*u3|  -|Q3*u2| ]
/// [ |Q0*u2|  -|Q1*u3|   0        |Q3*u1| ]
/// [ |Q0*u3|   |Q1*u2|  -|Q2*u1|   0      ]
/// ```
pub fn build_norm_system(k: &QuatKernel, u: &ColorImage, f: &ColorImage) -> Result<NormSystem> {
    u.ensure_same_dim(f)?;
    let n = convolution_l1_table(k, u)?;
    // n[i][c] = ||Q_i ⋆ u_{c+1}||_1
    let a = [
        [n[0][0], 0.0, n[2][2], -n[3][1]],
        [n[0][1], -n[1][2], 0.0, n[3][0]],
        [n[0][2], n[1][1], -n[2][0], 0.0],
    ];
    let rhs = [f.channel_l1(0), f.channel_l1(1), f.channel_l1(2)];
    Ok(NormSystem { a, rhs })
}

/// Minimum-norm least-squares scale vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleSolution {
    pub t: ScaleVector,
    /// `||A t - rhs||_2`
    pub residual: f64,
}

/// `t = pinv(A) rhs` through a reduced SVD.
pub fn solve_scale(sys: &NormSystem) -> Result<ScaleSolution> {
    let a = sys.matrix();
    let svd = a.svd(true, true);
    let sigma_max = svd.singular_values.max();
    if !(sigma_max > 0.0) {
        return Err(Error::DegenerateSystem);
    }
    let pinv = svd
        .pseudo_inverse(PINV_CUTOFF * sigma_max)
        .map_err(|_| Error::DegenerateSystem)?;
    let t = pinv * Vector3::from(sys.rhs);
    let t = ScaleVector([t[0], t[1], t[2], t[3]]);
    Ok(ScaleSolution { residual: sys.residual(&t), t })
}

/// `Q̃ = (t0 Q0, t1 Q1, t2 Q2, t3 Q3)`
pub fn apply_normalization(k: &QuatKernel, t: &ScaleVector) -> Result<QuatKernel> {
    if t.0.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter(format!("non-finite scale vector {:?}", t.0)));
    }
    Ok(k.scaled(t.0))
}

/// Outcome of [`normalize_kernel`].
#[derive(Debug, Clone)]
pub struct Normalization {
    pub kernel: QuatKernel,
    pub t: ScaleVector,
    pub residual: f64,
    /// True when the pseudoinverse solution was rejected (degenerate system
    /// or `t0 <= 0`) and only `q0` was rescaled.
    pub fallback: bool,
}

/// Build, solve and apply the normalization, falling back to an L1-matching
/// rescale of `q0` alone when `t0 <= 0` or the system is degenerate.
pub fn normalize_kernel(k: &QuatKernel, u: &ColorImage, f: &ColorImage) -> Result<Normalization> {
    normalize_with_system(k, &build_norm_system(k, u, f)?)
}

/// [`normalize_kernel`] on an already assembled system.
pub fn normalize_with_system(k: &QuatKernel, sys: &NormSystem) -> Result<Normalization> {
    match solve_scale(sys) {
        Ok(sol) if sol.t.0[0] > 0.0 => Ok(Normalization {
            kernel: apply_normalization(k, &sol.t)?,
            t: sol.t,
            residual: sol.residual,
            fallback: false,
        }),
        Ok(_) | Err(Error::DegenerateSystem) => fallback_normalization(k, sys),
        Err(e) => Err(e),
    }
}

/// Rescale `q0` alone so the summed channel L1 norms match; `q1..q3` are
/// left as they are.
pub fn fallback_normalization(k: &QuatKernel, sys: &NormSystem) -> Result<Normalization> {
    let target: f64 = sys.rhs.iter().sum();
    let current: f64 = (0..3).map(|c| sys.a[c][0]).sum();
    if !(current > 0.0) {
        return Err(Error::EmptyKernel("q0 produces no response on the latent image".into()));
    }
    let t = ScaleVector([target / current, 1.0, 1.0, 1.0]);
    Ok(Normalization {
        kernel: apply_normalization(k, &t)?,
        residual: sys.residual(&t),
        t,
        fallback: true,
    })
}

/// Divide every component by `||Q0||_1 + ||Q1||_1 + ||Q2||_1 + ||Q3||_1`.
pub fn normalize_l1(k: &QuatKernel) -> Result<QuatKernel> {
    let total = k.norms().l1;
    if !(total > 0.0) {
        return Err(Error::EmptyKernel("cannot L1-normalize a zero kernel".into()));
    }
    Ok(k.scaled([1.0 / total; 4]))
}

/// `Σ_c | ||(Q ⊛ u)_c||_1 - ||f_c||_1 |`
pub fn channel_l1_mismatch(k: &QuatKernel, u: &ColorImage, f: &ColorImage) -> Result<f64> {
    use crate::quat::{qconv_fft, QuatImage};
    let out = qconv_fft(k, &QuatImage::from_color(u))?;
    Ok((0..3)
        .map(|c| (out.part(c + 1).iter().map(|v| v.abs()).sum::<f64>() - f.channel_l1(c)).abs())
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> ColorImage {
        let vals: Vec<f64> = (0..3 * rows * cols).map(|_| rng.random::<f64>()).collect();
        ColorImage::from_fn(rows, cols, |c, r, k| vals[(c * rows + r) * cols + k])
    }

    fn random_kernel(rng: &mut ChaCha8Rng, size: usize) -> QuatKernel {
        let mut parts: [Array2<f64>; 4] = std::array::from_fn(|_| Array2::zeros((size, size)));
        for part in parts.iter_mut() {
            part.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        }
        QuatKernel::new(parts).unwrap()
    }

    #[test]
    fn identity_kernel_system() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random_image(&mut rng, 8, 8);
        let sys = build_norm_system(&QuatKernel::identity(3), &f, &f).unwrap();
        for c in 0..3 {
            assert!((sys.a[c][0] - f.channel_l1(c)).abs() < 1e-10);
            assert_eq!(&sys.a[c][1..], &[0.0; 3]);
        }
        let sol = solve_scale(&sys).unwrap();
        for (got, want) in sol.t.0.iter().zip([1.0, 0.0, 0.0, 0.0]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_q2_empties_its_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut k = random_kernel(&mut rng, 3);
        k.component_mut(2).fill(0.0);
        let u = random_image(&mut rng, 8, 8);
        let sys = build_norm_system(&k, &u, &u).unwrap();
        assert!((0..3).all(|r| sys.a[r][2] == 0.0));
    }

    #[test]
    fn zero_matrix_is_degenerate() {
        let sys = NormSystem { a: [[0.0; 4]; 3], rhs: [1.0, 2.0, 3.0] };
        assert!(matches!(solve_scale(&sys), Err(Error::DegenerateSystem)));
    }

    #[test]
    fn apply_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = random_kernel(&mut rng, 3);
        assert_eq!(apply_normalization(&k, &ScaleVector::ONES).unwrap(), k);
        let t = apply_normalization(&k, &ScaleVector([2.0, 0.0, 0.0, 0.0])).unwrap();
        assert_eq!(t.component(0), &(k.component(0) * 2.0));
        for i in 1..4 {
            assert!(t.component(i).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn l1_normalization() {
        assert_eq!(normalize_l1(&QuatKernel::identity(3)).unwrap(), QuatKernel::identity(3));
        let mut k = QuatKernel::zeros(3);
        for i in 0..4 {
            k.component_mut(i)[[1, 1]] = 1.0;
        }
        let n = normalize_l1(&k).unwrap();
        assert!(n.parts().iter().all(|p| p[[1, 1]] == 0.25));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = normalize_l1(&random_kernel(&mut rng, 5)).unwrap();
        assert!((r.norms().l1 - 1.0).abs() < 1e-12);
        assert!(normalize_l1(&QuatKernel::zeros(3)).is_err());
    }

    #[test]
    fn fallback_rescales_q0_only() {
        // pinv solution of this system has t0 ≈ -0.046
        let sys = NormSystem {
            a: [[1.0, 0.0, 1.0, -2.0], [4.0, -2.0, 0.0, -4.0], [2.0, 1.0, -4.0, 0.0]],
            rhs: [4.0, 1.0, 1.0],
        };
        assert!(solve_scale(&sys).unwrap().t.0[0] < 0.0);
        let k = QuatKernel::identity(3);
        let n = normalize_with_system(&k, &sys).unwrap();
        assert!(n.fallback);
        assert_eq!(n.t, ScaleVector([6.0 / 7.0, 1.0, 1.0, 1.0]));
        assert_eq!(n.kernel.component(0)[[1, 1]], 6.0 / 7.0);
    }

    #[test]
    fn fallback_with_zero_q0_is_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let u = random_image(&mut rng, 8, 8);
        let k = QuatKernel::zeros(3);
        assert!(matches!(normalize_kernel(&k, &u, &u), Err(Error::EmptyKernel(_))));
    }
}
