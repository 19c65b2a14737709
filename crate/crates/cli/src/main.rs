//! `qdeblur`: blind color deblurring, kernel estimation, synthetic blur,
//! evaluation and kernel rendering.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use qdeblur_core::io::{load_image, load_kernel, save_image, save_kernel, KernelFile, KernelMode};
use qdeblur_core::metrics::{mean_ciede2000, psnr, scielab_map, ssim};
use qdeblur_core::normalize::ScaleVector;
use qdeblur_core::pipeline::{
    blind_deblur, estimate_from_pair, synth_blur, EstimationMode, LevelDiagnostics, PairConfig, SolverConfig,
};
use qdeblur_core::render::render_kernel;
use qdeblur_core::Error;

#[derive(Parser, Debug)]
#[command(name = "qdeblur", version, about = "Blind deblurring of color images with quaternion convolution kernels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Estimate the kernel and the sharp image from a blurred image (or a directory of them)
    Deblur(DeblurArgs),
    /// Fit a kernel to a known sharp/blurred pair
    EstimateKernel(EstimateArgs),
    /// Apply a kernel file to an image, optionally adding Gaussian noise
    Blur(BlurArgs),
    /// Compare a test image against a reference and report quality metrics as JSON
    Evaluate(EvaluateArgs),
    /// Render the four kernel components side by side
    KernelView(ViewArgs),
}

fn positive(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        Ok(v) => Err(format!("must be positive, got {v}")),
        Err(e) => Err(e.to_string()),
    }
}

fn non_negative(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v >= 0.0 && v.is_finite() => Ok(v),
        Ok(v) => Err(format!("must be non-negative, got {v}")),
        Err(e) => Err(e.to_string()),
    }
}

fn odd_size(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(v) if v % 2 == 1 => Ok(v),
        Ok(v) => Err(format!("must be odd, got {v}")),
        Err(e) => Err(e.to_string()),
    }
}

/// Solver overrides; anything left unset comes from `--config` or the defaults.
#[derive(Args, Debug, Default)]
struct SolverFlags {
    /// L0 gradient weight (typically 0.004 to 0.02)
    #[arg(long, value_parser = positive)]
    lambda: Option<f64>,
    /// Tikhonov weight on the kernel
    #[arg(long, value_parser = non_negative)]
    gamma: Option<f64>,
    /// Penalty ceiling of the splitting schedule
    #[arg(long, value_parser = positive)]
    beta_max: Option<f64>,
    /// Outer iterations per pyramid level
    #[arg(long)]
    outer_iters: Option<usize>,
    /// Kernel support at full resolution (odd)
    #[arg(long, value_parser = odd_size)]
    kernel_size: Option<usize>,
    /// Downscaling factor between pyramid levels
    #[arg(long, value_parser = positive)]
    pyramid_scale: Option<f64>,
    /// Kernel support at the coarsest level (odd)
    #[arg(long, value_parser = odd_size)]
    min_kernel: Option<usize>,
    /// Conjugate-gradient iteration cap of the kernel step
    #[arg(long)]
    cg_iters: Option<usize>,
    /// Relative residual at which the kernel step stops
    #[arg(long, value_parser = non_negative)]
    cg_tol: Option<f64>,
    /// Relative threshold below which kernel taps are zeroed
    #[arg(long, value_parser = non_negative)]
    clip_ratio: Option<f64>,
    /// L0 weight of the final restoration
    #[arg(long, value_parser = positive)]
    final_lambda: Option<f64>,
    /// Pad with a smooth periodic border before each latent solve
    #[arg(long)]
    edge_taper: Option<bool>,
}

impl SolverFlags {
    fn apply(&self, cfg: &mut SolverConfig) {
        macro_rules! take {
            ($($f:ident),*) => {$( if let Some(v) = self.$f { cfg.$f = v; } )*};
        }
        take!(
            lambda,
            gamma,
            beta_max,
            outer_iters,
            kernel_size,
            pyramid_scale,
            min_kernel,
            cg_iters,
            cg_tol,
            clip_ratio,
            final_lambda,
            edge_taper
        );
    }
}

#[derive(Args, Debug)]
struct DeblurArgs {
    /// Blurred input image, or a directory of PNG/PPM images
    #[arg(short, long)]
    input: PathBuf,
    /// Restored image, or the output directory in batch mode
    #[arg(short, long)]
    output: PathBuf,
    /// Kernel file (a directory in batch mode)
    #[arg(long)]
    kernel_out: Option<PathBuf>,
    /// Per-level diagnostics as JSON (a directory in batch mode)
    #[arg(long)]
    diagnostics_out: Option<PathBuf>,
    /// Text file of `key = value` solver settings
    #[arg(long)]
    config: Option<PathBuf>,
    /// Images processed concurrently in batch mode
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[command(flatten)]
    solver: SolverFlags,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Cck,
    QckL1,
    QckNorm,
}

impl From<Mode> for EstimationMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Cck => EstimationMode::Cck,
            Mode::QckL1 => EstimationMode::QckL1,
            Mode::QckNorm => EstimationMode::QckNorm,
        }
    }
}

#[derive(Args, Debug)]
struct EstimateArgs {
    #[arg(long)]
    sharp: PathBuf,
    #[arg(long)]
    blurred: PathBuf,
    #[arg(long, value_enum, default_value = "qck-norm")]
    mode: Mode,
    /// Kernel file to write
    #[arg(short, long)]
    output: PathBuf,
    /// Also write the sharp image blurred with the estimated kernel
    #[arg(long)]
    reapply: Option<PathBuf>,
    #[arg(long, default_value_t = 25, value_parser = odd_size)]
    kernel_size: usize,
    #[arg(long, default_value_t = 2.0, value_parser = non_negative)]
    gamma: f64,
    #[arg(long, default_value_t = qdeblur_core::kernel::DEFAULT_CG_ITERS)]
    cg_iters: usize,
    #[arg(long, default_value_t = qdeblur_core::kernel::DEFAULT_CG_TOL, value_parser = non_negative)]
    cg_tol: f64,
    #[arg(long, default_value_t = qdeblur_core::kernel::DEFAULT_CLIP_RATIO, value_parser = non_negative)]
    clip_ratio: f64,
}

#[derive(Args, Debug)]
struct BlurArgs {
    #[arg(short, long)]
    input: PathBuf,
    /// Kernel file
    #[arg(short, long)]
    kernel: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
    /// Standard deviation of additive Gaussian noise
    #[arg(long, default_value_t = 0.0, value_parser = non_negative)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(short, long)]
    reference: PathBuf,
    #[arg(short, long)]
    test: PathBuf,
    /// Viewing resolution in pixels per degree
    #[arg(long, default_value_t = qdeblur_core::metrics::DEFAULT_PPD, value_parser = positive)]
    ppd: f64,
    /// S-CIELAB difference counted as an error
    #[arg(long, default_value_t = qdeblur_core::metrics::DEFAULT_THRESHOLD, value_parser = non_negative)]
    threshold: f64,
    /// PNG of the error field with exceeding pixels in green
    #[arg(long)]
    error_map: Option<PathBuf>,
    /// Write the JSON here instead of stdout
    #[arg(long)]
    json_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ViewArgs {
    #[arg(short, long)]
    kernel: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
    /// Pixels per kernel tap
    #[arg(long, default_value_t = 16)]
    cell: usize,
}

enum Failure {
    Usage(String),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::SingularBlock { .. } | Error::DegenerateInput(_) | Error::EmptyKernel(_) | Error::DegenerateSystem => {
                Failure::Numerical(e.to_string())
            }
            _ => Failure::Usage(e.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn write_text(path: &Path, text: &str) -> CmdResult {
    fs::write(path, text).map_err(|e| Failure::Usage(format!("failed to write {}: {e}", path.display())))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

#[derive(Serialize)]
struct Diagnostics<'a> {
    config: &'a SolverConfig,
    initial_objective: f64,
    final_objective: f64,
    scale_history: &'a [ScaleVector],
    levels: &'a [LevelDiagnostics],
}

fn deblur_one(input: &Path, output: &Path, kernel_out: Option<&Path>, diag_out: Option<&Path>, cfg: &SolverConfig) -> CmdResult {
    let f = load_image(input)?;
    let res = blind_deblur(&f, cfg)?;
    save_image(&res.latent, output)?;
    if let Some(path) = kernel_out {
        let file = KernelFile { kernel: res.kernel.clone(), mode: KernelMode::QckNorm, t: None };
        save_kernel(&file, path)?;
    }
    if let Some(path) = diag_out {
        let diag = Diagnostics {
            config: cfg,
            initial_objective: res.initial_objective,
            final_objective: res.final_objective,
            scale_history: &res.scale_history,
            levels: &res.levels,
        };
        write_text(path, &to_json(&diag))?;
    }
    Ok(())
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("png" | "ppm" | "pnm")
    )
}

fn ensure_dir(path: &Path) -> CmdResult {
    fs::create_dir_all(path).map_err(|e| Failure::Usage(format!("cannot create {}: {e}", path.display())))
}

fn cmd_deblur(args: DeblurArgs) -> CmdResult {
    let mut cfg = SolverConfig::default();
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("failed to read {}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    args.solver.apply(&mut cfg);
    cfg.validate()?;

    if !args.input.exists() {
        return Err(Failure::Usage(format!("input not found: {}", args.input.display())));
    }
    if !args.input.is_dir() {
        return deblur_one(&args.input, &args.output, args.kernel_out.as_deref(), args.diagnostics_out.as_deref(), &cfg);
    }

    let mut inputs: Vec<PathBuf> = fs::read_dir(&args.input)
        .map_err(|e| Failure::Usage(format!("cannot list {}: {e}", args.input.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image(p))
        .collect();
    inputs.sort();
    ensure_dir(&args.output)?;
    for dir in [&args.kernel_out, &args.diagnostics_out].into_iter().flatten() {
        ensure_dir(dir)?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs.max(1))
        .build()
        .map_err(|e| Failure::Usage(e.to_string()))?;
    let results: Vec<(PathBuf, CmdResult)> = pool.install(|| {
        inputs
            .par_iter()
            .map(|input| {
                let stem = input.file_stem().unwrap_or_default().to_string_lossy().into_owned();
                let output = args.output.join(format!("{stem}.png"));
                let kernel = args.kernel_out.as_ref().map(|d| d.join(format!("{stem}.qkern")));
                let diag = args.diagnostics_out.as_ref().map(|d| d.join(format!("{stem}.json")));
                (input.clone(), deblur_one(input, &output, kernel.as_deref(), diag.as_deref(), &cfg))
            })
            .collect()
    });
    let mut worst = Ok(());
    for (input, res) in results {
        if let Err(failure) = res {
            let (Failure::Usage(msg) | Failure::Numerical(msg)) = &failure;
            eprintln!("{}: {msg}", input.display());
            if !matches!(worst, Err(Failure::Numerical(_))) {
                worst = Err(failure);
            }
        }
    }
    worst
}

fn cmd_estimate(args: EstimateArgs) -> CmdResult {
    let sharp = load_image(&args.sharp)?;
    let blurred = load_image(&args.blurred)?;
    let cfg = PairConfig {
        kernel_size: args.kernel_size,
        gamma: args.gamma,
        cg_iters: args.cg_iters,
        cg_tol: args.cg_tol,
        clip_ratio: args.clip_ratio,
    };
    let mode = EstimationMode::from(args.mode);
    let est = estimate_from_pair(&sharp, &blurred, mode, &cfg)?;
    save_kernel(&KernelFile { kernel: est.kernel.clone(), mode: mode.into(), t: est.t }, &args.output)?;
    if let Some(path) = &args.reapply {
        save_image(&synth_blur(&sharp, &est.kernel, 0.0, 0)?.image, path)?;
    }
    Ok(())
}

fn cmd_blur(args: BlurArgs) -> CmdResult {
    let u = load_image(&args.input)?;
    let k = load_kernel(&args.kernel)?.kernel;
    let out = synth_blur(&u, &k, args.sigma, args.seed)?;
    save_image(&out.image, &args.output)?;
    Ok(())
}

#[derive(Serialize)]
struct ScielabSummary {
    sum: f64,
    exceed_count: usize,
    mean: f64,
    threshold: f64,
}

#[derive(Serialize)]
struct Evaluation {
    psnr: f64,
    ssim: f64,
    /// Mean of the per-pixel CIEDE2000 differences.
    ciede2000: f64,
    ciede2000_aggregation: &'static str,
    scielab: ScielabSummary,
}

fn cmd_evaluate(args: EvaluateArgs) -> CmdResult {
    let reference = load_image(&args.reference)?;
    let test = load_image(&args.test)?;
    let map = scielab_map(&reference, &test, args.ppd)?.with_threshold(args.threshold);
    let report = Evaluation {
        psnr: psnr(&reference, &test)?,
        ssim: ssim(&reference, &test)?,
        ciede2000: mean_ciede2000(&reference, &test)?,
        ciede2000_aggregation: "mean",
        scielab: ScielabSummary { sum: map.sum(), exceed_count: map.exceed_count, mean: map.mean_de, threshold: map.threshold },
    };
    if let Some(path) = &args.error_map {
        save_image(&map.heatmap(), path)?;
    }
    let json = to_json(&report);
    match &args.json_out {
        Some(path) => write_text(path, &json),
        None => {
            print!("{json}");
            Ok(())
        }
    }
}

fn cmd_kernel_view(args: ViewArgs) -> CmdResult {
    let file = load_kernel(&args.kernel)?;
    save_image(&render_kernel(&file.kernel, args.cell), &args.output)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Deblur(a) => cmd_deblur(a),
        Command::EstimateKernel(a) => cmd_estimate(a),
        Command::Blur(a) => cmd_blur(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::KernelView(a) => cmd_kernel_view(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
