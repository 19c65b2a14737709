//! Coarse-to-fine blind deconvolution and the non-blind restoration pass.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::image::{build_pyramid, gradient, pad_with_taper, upsample_kernel, ColorImage};
use crate::io::KernelMode;
use crate::kernel::{estimate_kernel_cck, estimate_kernel_with_real_plane, estimate_kernel_with_report, project_kernel, recenter_kernel, DEFAULT_CG_ITERS, DEFAULT_CG_TOL, DEFAULT_CLIP_RATIO};
use crate::latent::{l0_count, solve_latent_with_stats};
use crate::normalize::{
    build_norm_system, fallback_normalization, normalize_kernel, normalize_l1, normalize_with_system, Normalization, ScaleVector,
};
use crate::quat::{qconv_fft, QuatImage, QuatKernel};

/// Solver settings. Every run is fully deterministic.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolverConfig {
    pub lambda: f64,
    pub gamma: f64,
    pub beta_max: f64,
    pub outer_iters: usize,
    pub kernel_size: usize,
    pub pyramid_scale: f64,
    pub min_kernel: usize,
    pub cg_iters: usize,
    pub cg_tol: f64,
    pub clip_ratio: f64,
    pub final_lambda: f64,
    /// Pad each latent solve with a smooth periodic border of one kernel
    /// radius.
    pub edge_taper: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            lambda: 0.004,
            gamma: 2.0,
            beta_max: 8.0,
            outer_iters: 50,
            kernel_size: 25,
            pyramid_scale: std::f64::consts::FRAC_1_SQRT_2,
            min_kernel: 3,
            cg_iters: DEFAULT_CG_ITERS,
            cg_tol: DEFAULT_CG_TOL,
            clip_ratio: DEFAULT_CLIP_RATIO,
            final_lambda: 0.002,
            edge_taper: true,
        }
    }
}

impl SolverConfig {
    pub const KEYS: [&'static str; 12] = [
        "lambda",
        "gamma",
        "beta_max",
        "outer_iters",
        "kernel_size",
        "pyramid_scale",
        "min_kernel",
        "cg_iters",
        "cg_tol",
        "clip_ratio",
        "final_lambda",
        "edge_taper",
    ];

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be positive, got {}", self.lambda));
        }
        if !(self.final_lambda > 0.0 && self.final_lambda.is_finite()) {
            return bad(format!("final_lambda must be positive, got {}", self.final_lambda));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be non-negative, got {}", self.gamma));
        }
        if !(self.beta_max > 2.0 * self.lambda.max(self.final_lambda) && self.beta_max.is_finite()) {
            return bad(format!("beta_max {} must exceed twice lambda", self.beta_max));
        }
        if self.kernel_size % 2 == 0 || self.min_kernel % 2 == 0 || self.min_kernel < 3 || self.kernel_size < self.min_kernel {
            return bad(format!(
                "kernel sizes must be odd with 3 <= min_kernel ({}) <= kernel_size ({})",
                self.min_kernel, self.kernel_size
            ));
        }
        if !(self.pyramid_scale > 0.0 && self.pyramid_scale < 1.0) {
            return bad(format!("pyramid_scale {} not in (0, 1)", self.pyramid_scale));
        }
        if !(self.cg_tol >= 0.0) {
            return bad(format!("cg_tol must be non-negative, got {}", self.cg_tol));
        }
        if !(0.0..1.0).contains(&self.clip_ratio) {
            return bad(format!("clip_ratio {} not in [0, 1)", self.clip_ratio));
        }
        Ok(())
    }

    /// Set a field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let float = || value.parse::<f64>().map_err(|_| Error::InvalidParameter(format!("{key}: not a number: {value:?}")));
        let int = || value.parse::<usize>().map_err(|_| Error::InvalidParameter(format!("{key}: not an integer: {value:?}")));
        match key.trim().replace('-', "_").as_str() {
            "lambda" => self.lambda = float()?,
            "gamma" => self.gamma = float()?,
            "beta_max" => self.beta_max = float()?,
            "outer_iters" => self.outer_iters = int()?,
            "kernel_size" => self.kernel_size = int()?,
            "pyramid_scale" => self.pyramid_scale = float()?,
            "min_kernel" => self.min_kernel = int()?,
            "cg_iters" => self.cg_iters = int()?,
            "cg_tol" => self.cg_tol = float()?,
            "clip_ratio" => self.clip_ratio = float()?,
            "final_lambda" => self.final_lambda = float()?,
            "edge_taper" => {
                self.edge_taper = value
                    .parse::<bool>()
                    .map_err(|_| Error::InvalidParameter(format!("{key}: expected true or false, got {value:?}")))?
            }
            other => return Err(Error::InvalidParameter(format!("unknown setting {other:?}"))),
        }
        Ok(())
    }

    /// Apply `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidParameter(format!("line {}: expected key = value", n + 1)))?;
            self.set(key, value)?;
        }
        Ok(())
    }
}

/// One outer iteration at one pyramid level.
#[derive(Debug, Clone, Serialize)]
pub struct IterationDiagnostics {
    /// `||Q ⊛ u - f||² + λ ||∇u||_0 + γ ||Q||²` after the kernel update.
    pub objective: f64,
    pub norm_residual: f64,
    pub fallback: bool,
    pub cg_iterations: usize,
    pub cg_residual: f64,
    pub real_part_rms: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LevelDiagnostics {
    pub rows: usize,
    pub cols: usize,
    pub kernel_size: usize,
    pub iterations: Vec<IterationDiagnostics>,
}

#[derive(Debug, Clone)]
pub struct DeblurResult {
    pub latent: ColorImage,
    pub kernel: QuatKernel,
    pub scale_history: Vec<ScaleVector>,
    pub levels: Vec<LevelDiagnostics>,
    /// Objective of the initial kernel with `u = f` at full resolution.
    pub initial_objective: f64,
    /// Objective of the returned kernel and latent image.
    pub final_objective: f64,
}

/// `||Im(Q ⊛ u) - f||²` over the three color planes.
pub fn color_fidelity(k: &QuatKernel, u: &ColorImage, f: &ColorImage) -> Result<f64> {
    let out = qconv_fft(k, &QuatImage::from_color(u))?;
    Ok((0..3).map(|c| (out.part(c + 1) - f.channel(c)).mapv(|x| x * x).sum()).sum())
}

/// `||Im(Q ⊛ u) - f||² + λ ||∇u||_0 + γ ||Q||²`
pub fn objective(k: &QuatKernel, u: &ColorImage, f: &ColorImage, lambda: f64, gamma: f64) -> Result<f64> {
    let fit = color_fidelity(k, u, f)?;
    let g = gradient(u)?;
    let fro = k.norms().frobenius;
    Ok(fit + lambda * l0_count(&g) as f64 + gamma * fro * fro)
}

/// Coarsest-level starting kernel: two adjacent center taps of `q0` at 0.5.
pub fn initial_kernel(size: usize) -> Result<QuatKernel> {
    let mut k = QuatKernel::zeros(3);
    k.component_mut(0)[[1, 1]] = 0.5;
    k.component_mut(0)[[1, 2]] = 0.5;
    k.embed(size)
}

fn latent_step(f: &ColorImage, k: &QuatKernel, lambda: f64, beta_max: f64, taper: bool) -> Result<ColorImage> {
    let (rows, cols) = f.dim();
    let pad = if taper { k.size() } else { 0 };
    let padded = pad_with_taper(f, pad);
    let solve = solve_latent_with_stats(&padded, k, lambda, 2.0 * lambda, beta_max)?;
    Ok(solve.image.crop(pad, pad, rows, cols))
}

/// Scale all four components so that `q0` sums to one.
pub fn unit_dc_gain(k: &QuatKernel) -> Result<QuatKernel> {
    let sum = k.component(0).sum();
    if !(sum > 0.0) {
        return Err(Error::EmptyKernel("q0 has no positive mass".into()));
    }
    Ok(k.scaled([1.0 / sum; 4]))
}

/// Normalize `k`, keeping the q0-only fallback instead whenever it fits `f`
/// at least as well in the intensity domain.
pub fn guarded_normalization(k: &QuatKernel, u: &ColorImage, f: &ColorImage) -> Result<Normalization> {
    let sys = build_norm_system(k, u, f)?;
    let norm = normalize_with_system(k, &sys)?;
    if norm.fallback {
        return Ok(norm);
    }
    let fallback = fallback_normalization(k, &sys)?;
    if color_fidelity(&fallback.kernel, u, f)? <= color_fidelity(&norm.kernel, u, f)? {
        Ok(fallback)
    } else {
        Ok(norm)
    }
}

/// Estimate a quaternion kernel and a sharp image from a blurred color image.
pub fn blind_deblur(f: &ColorImage, cfg: &SolverConfig) -> Result<DeblurResult> {
    cfg.validate()?;
    let pyramid = build_pyramid(f, cfg.kernel_size, cfg.pyramid_scale, cfg.min_kernel)?;
    let init = initial_kernel(pyramid.levels[0].kernel_size)?;
    let initial_objective = objective(&init.embed(cfg.kernel_size)?, f, f, cfg.lambda, cfg.gamma)?;
    if cfg.outer_iters == 0 {
        return Ok(DeblurResult {
            latent: f.clone(),
            kernel: init.embed(cfg.kernel_size)?,
            scale_history: Vec::new(),
            levels: Vec::new(),
            initial_objective,
            final_objective: initial_objective,
        });
    }

    let mut k = init;
    let mut scale_history = Vec::new();
    let mut levels = Vec::with_capacity(pyramid.levels.len());
    for level in &pyramid.levels {
        let fl = &level.image;
        let size = level.kernel_size;
        if k.size() != size {
            k = upsample_kernel(&k, size)?;
        }
        let mut iterations = Vec::with_capacity(cfg.outer_iters);
        let pad = if cfg.edge_taper { size } else { 0 };
        let fp = pad_with_taper(fl, pad);
        for _ in 0..cfg.outer_iters {
            let solve = solve_latent_with_stats(&fp, &k, cfg.lambda, 2.0 * cfg.lambda, cfg.beta_max)?;
            let up = solve.image;
            // the zero real plane keeps q1..q3 from absorbing latent errors
            let est = estimate_kernel_with_real_plane(&QuatImage::from_color(&up), &fp, size, cfg.gamma, cfg.cg_iters, cfg.cg_tol)?;
            let projected = project_kernel(&est.kernel, cfg.clip_ratio)?;
            let norm = guarded_normalization(&projected, &up, &fp)?;
            k = recenter_kernel(&unit_dc_gain(&norm.kernel)?);
            scale_history.push(norm.t);
            iterations.push(IterationDiagnostics {
                objective: objective(&k, &up, &fp, cfg.lambda, cfg.gamma)?,
                norm_residual: norm.residual,
                fallback: norm.fallback,
                cg_iterations: est.cg.iterations,
                cg_residual: *est.cg.residuals.last().unwrap_or(&0.0),
                real_part_rms: solve.real_part_rms,
            });
        }
        let (rows, cols) = fl.dim();
        levels.push(LevelDiagnostics { rows, cols, kernel_size: size, iterations });
    }

    let latent = latent_step(f, &k, cfg.final_lambda, cfg.beta_max, cfg.edge_taper)?;
    let final_objective = objective(&k, &latent, f, cfg.lambda, cfg.gamma)?;
    Ok(DeblurResult { latent, kernel: k, scale_history, levels, initial_objective, final_objective })
}

/// How a kernel is estimated from a sharp/blurred pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimationMode {
    /// One nonnegative real kernel with unit L1 norm for all channels.
    Cck,
    /// Quaternion kernel scaled to `||Q||_1 = 1`.
    QckL1,
    /// Quaternion kernel with per-component scales from the L1 system.
    QckNorm,
}

impl From<EstimationMode> for KernelMode {
    fn from(m: EstimationMode) -> Self {
        match m {
            EstimationMode::Cck => KernelMode::Cck,
            EstimationMode::QckL1 => KernelMode::QckL1,
            EstimationMode::QckNorm => KernelMode::QckNorm,
        }
    }
}

/// Settings for [`estimate_from_pair`].
#[derive(Debug, Clone, PartialEq)]
pub struct PairConfig {
    pub kernel_size: usize,
    pub gamma: f64,
    pub cg_iters: usize,
    pub cg_tol: f64,
    pub clip_ratio: f64,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self { kernel_size: 25, gamma: 2.0, cg_iters: DEFAULT_CG_ITERS, cg_tol: DEFAULT_CG_TOL, clip_ratio: DEFAULT_CLIP_RATIO }
    }
}

/// Kernel estimated from a known pair, with the scale vector when the mode
/// produces one.
#[derive(Debug, Clone)]
pub struct PairEstimate {
    pub kernel: QuatKernel,
    pub t: Option<ScaleVector>,
}

/// Fit a kernel mapping `sharp` to `blurred` under the given mode.
pub fn estimate_from_pair(sharp: &ColorImage, blurred: &ColorImage, mode: EstimationMode, cfg: &PairConfig) -> Result<PairEstimate> {
    sharp.ensure_same_dim(blurred)?;
    let PairConfig { kernel_size, gamma, cg_iters, cg_tol, clip_ratio } = *cfg;
    if mode == EstimationMode::Cck {
        let k = estimate_kernel_cck(sharp, blurred, kernel_size, gamma, cg_iters, cg_tol)?;
        return Ok(PairEstimate { kernel: QuatKernel::from_real(k)?, t: None });
    }
    let raw = estimate_kernel_with_report(sharp, blurred, kernel_size, gamma, cg_iters, cg_tol)?.kernel;
    let projected = project_kernel(&raw, clip_ratio)?;
    match mode {
        EstimationMode::QckL1 => Ok(PairEstimate { kernel: normalize_l1(&projected)?, t: None }),
        _ => {
            let norm = normalize_kernel(&projected, sharp, blurred)?;
            Ok(PairEstimate { kernel: norm.kernel, t: Some(norm.t) })
        }
    }
}

/// Penalty ceiling used by [`nonblind_restore`].
pub const DEFAULT_BETA_MAX: f64 = 8.0;

/// Latent image for a known kernel: one L0-regularized solve at full
/// resolution.
pub fn nonblind_restore(f: &ColorImage, k: &QuatKernel, lambda: f64) -> Result<ColorImage> {
    Ok(solve_latent_with_stats(f, k, lambda, 2.0 * lambda, DEFAULT_BETA_MAX)?.image)
}

/// Output of [`synth_blur`].
#[derive(Debug, Clone)]
pub struct SyntheticBlur {
    pub image: ColorImage,
    /// Real plane of `Q ⊛ u`, discarded from the observation.
    pub real_part: Array2<f64>,
}

/// `f = Im(Q ⊛ u) + n` with periodic boundaries and i.i.d. Gaussian noise of
/// standard deviation `noise_sigma` drawn from a generator seeded by `seed`.
pub fn synth_blur(u: &ColorImage, k: &QuatKernel, noise_sigma: f64, seed: u64) -> Result<SyntheticBlur> {
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::InvalidParameter(format!("noise sigma must be non-negative, got {noise_sigma}")));
    }
    let [real_part, r, g, b] = qconv_fft(k, &QuatImage::from_color(u))?.into_parts();
    let mut channels = [r, g, b];
    if noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, noise_sigma).expect("valid sigma");
        for p in channels.iter_mut() {
            p.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
        }
    }
    Ok(SyntheticBlur { image: ColorImage::from_channels(channels)?, real_part })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::mse;
    use crate::metrics::psnr;
    use crate::synth::natural_texture;

    fn blocky(rows: usize, cols: usize) -> ColorImage {
        ColorImage::from_fn(rows, cols, |c, r, k| (((r / 8) + (k / 8) + c) % 2) as f64)
    }

    #[test]
    fn config_text_and_validation() {
        let mut cfg = SolverConfig::default();
        cfg.apply_text("# comment\nlambda = 0.02\nkernel-size=9\n\nedge_taper = false\n").unwrap();
        assert_eq!((cfg.lambda, cfg.kernel_size, cfg.edge_taper), (0.02, 9, false));
        assert!(cfg.set("nope", "1").is_err());
        assert!(cfg.set("lambda", "abc").is_err());
        cfg.lambda = -1.0;
        assert!(cfg.validate().is_err());
        assert!(SolverConfig { kernel_size: 8, ..Default::default() }.validate().is_err());
        assert!(SolverConfig::default().validate().is_ok());
    }

    #[test]
    fn synth_blur_identity_and_noise() {
        let u = natural_texture(64, 64, 1);
        let k = QuatKernel::identity(3);
        let clean = synth_blur(&u, &k, 0.0, 0).unwrap();
        assert!(mse(&clean.image, &u).unwrap().sqrt() < 1e-14);
        assert!(clean.real_part.iter().all(|v| v.abs() < 1e-14));
        let noisy = synth_blur(&u, &k, 0.01, 7).unwrap().image;
        assert!((psnr(&noisy, &u).unwrap() - 40.0).abs() < 0.2);
        assert_eq!(noisy, synth_blur(&u, &k, 0.01, 7).unwrap().image);
    }

    #[test]
    fn synth_blur_pure_i_permutes_channels() {
        let u = natural_texture(8, 8, 2);
        let out = synth_blur(&u, &QuatKernel::unit(3, 1), 0.0, 0).unwrap();
        // i · (0, r, g, b) = (-r, 0, -b, g)
        let close = |a: &Array2<f64>, b: &Array2<f64>| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-14);
        assert!(close(&out.real_part, &u.channel(0).mapv(|v| -v)));
        assert!(out.image.channel(0).iter().all(|v| v.abs() < 1e-14));
        assert!(close(out.image.channel(1), &u.channel(2).mapv(|v| -v)));
        assert!(close(out.image.channel(2), u.channel(1)));
    }

    #[test]
    fn zero_outer_iterations_returns_initialization() {
        let f = natural_texture(32, 32, 3);
        let cfg = SolverConfig { kernel_size: 7, outer_iters: 0, ..Default::default() };
        let res = blind_deblur(&f, &cfg).unwrap();
        assert_eq!(res.latent, f);
        assert_eq!(res.kernel, initial_kernel(7).unwrap());
        assert!(res.levels.is_empty() && res.scale_history.is_empty());
    }

    #[test]
    fn nonblind_identity_is_a_fixed_point_on_strong_edges() {
        let f = blocky(32, 32);
        let u = nonblind_restore(&f, &QuatKernel::identity(3), 0.004).unwrap();
        assert!(psnr(&u, &f).unwrap() >= 60.0);
    }

    #[test]
    fn nonblind_known_kernel() {
        let sharp = natural_texture(64, 64, 11);
        let k = QuatKernel::from_real(crate::synth::motion_kernel(7, 5.0, 0.4)).unwrap();
        let f = synth_blur(&sharp, &k, 0.0, 0).unwrap().image;
        let u = nonblind_restore(&f, &k, 0.0005).unwrap();
        let p = psnr(&u, &sharp).unwrap();
        assert!(p >= 30.0, "restored psnr {p}");
    }

    #[test]
    fn larger_lambda_gives_sparser_gradients() {
        let k = QuatKernel::from_real(crate::synth::gaussian_kernel(5, 1.0)).unwrap();
        for seed in [1, 2, 5] {
            let sharp = natural_texture(48, 48, seed);
            let f = synth_blur(&sharp, &k, 0.0, 0).unwrap().image;
            let support = |lambda: f64| {
                crate::latent::solve_latent_with_stats(&f, &k, lambda, 2.0 * lambda, DEFAULT_BETA_MAX)
                    .unwrap()
                    .gradient_support
            };
            assert!(support(0.02) <= support(0.004));
        }
    }

    #[test]
    fn pair_modes_on_a_synthetic_pair() {
        let sharp = natural_texture(48, 48, 8);
        let q0 = crate::synth::motion_kernel(5, 3.0, 0.7);
        let k = QuatKernel::new([q0.clone(), Array2::zeros((5, 5)), &q0 * 0.1, Array2::zeros((5, 5))]).unwrap();
        let f = synth_blur(&sharp, &k, 0.0, 0).unwrap().image;
        let cfg = PairConfig { kernel_size: 5, gamma: 1e-6, cg_iters: 200, cg_tol: 1e-12, clip_ratio: 0.0 };
        let cck = estimate_from_pair(&sharp, &f, EstimationMode::Cck, &cfg).unwrap();
        assert!((cck.kernel.component(0).sum() - 1.0).abs() < 1e-12 && cck.t.is_none());
        let l1 = estimate_from_pair(&sharp, &f, EstimationMode::QckL1, &cfg).unwrap();
        assert!((l1.kernel.norms().l1 - 1.0).abs() < 1e-12);
        let norm = estimate_from_pair(&sharp, &f, EstimationMode::QckNorm, &cfg).unwrap();
        let reblur = synth_blur(&sharp, &norm.kernel, 0.0, 0).unwrap().image;
        assert!(psnr(&reblur, &f).unwrap() >= 40.0);
    }
}
