//! Two-dimensional FFT on row-major planes, built from `rustfft` 1-D plans.

use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

/// Forward/inverse 2-D transforms for one fixed plane shape.
///
/// The forward transform is unnormalized; the inverse divides by `rows * cols`.
#[derive(Clone)]
pub struct Fft2 {
    rows: usize,
    cols: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Fft2 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fft2")
            .field("rows", &self.rows)
            .field("cols", &self.cols)
            .finish()
    }
}

impl Fft2 {
    pub fn new(rows: usize, cols: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            rows,
            cols,
            row_fwd: planner.plan_fft_forward(cols),
            row_inv: planner.plan_fft_inverse(cols),
            col_fwd: planner.plan_fft_forward(rows),
            col_inv: planner.plan_fft_inverse(rows),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn forward(&self, plane: &Array2<f64>) -> Array2<Complex64> {
        assert_eq!(plane.dim(), (self.rows, self.cols));
        let mut data: Vec<Complex64> = plane.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.transform(&mut data, &self.row_fwd, &self.col_fwd);
        Array2::from_shape_vec((self.rows, self.cols), data).expect("shape")
    }

    pub fn forward_complex(&self, plane: &Array2<Complex64>) -> Array2<Complex64> {
        assert_eq!(plane.dim(), (self.rows, self.cols));
        let mut data: Vec<Complex64> = plane.iter().copied().collect();
        self.transform(&mut data, &self.row_fwd, &self.col_fwd);
        Array2::from_shape_vec((self.rows, self.cols), data).expect("shape")
    }

    pub fn inverse_complex(&self, spectrum: &Array2<Complex64>) -> Array2<Complex64> {
        assert_eq!(spectrum.dim(), (self.rows, self.cols));
        let mut data: Vec<Complex64> = spectrum.iter().copied().collect();
        self.transform(&mut data, &self.row_inv, &self.col_inv);
        let scale = 1.0 / (self.rows * self.cols) as f64;
        data.iter_mut().for_each(|c| *c *= scale);
        Array2::from_shape_vec((self.rows, self.cols), data).expect("shape")
    }

    /// Inverse transform keeping only the real part.
    pub fn inverse(&self, spectrum: &Array2<Complex64>) -> Array2<f64> {
        self.inverse_complex(spectrum).mapv(|c| c.re)
    }

    fn transform(&self, data: &mut [Complex64], row: &Arc<dyn Fft<f64>>, col: &Arc<dyn Fft<f64>>) {
        let (rows, cols) = (self.rows, self.cols);
        row.process(data);
        let mut transposed = vec![Complex64::new(0.0, 0.0); rows * cols];
        transpose(data, &mut transposed, rows, cols);
        col.process(&mut transposed);
        transpose(&transposed, data, cols, rows);
    }
}

fn transpose(src: &[Complex64], dst: &mut [Complex64], rows: usize, cols: usize) {
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

/// Embed a centered odd-sized kernel into a `rows x cols` plane so that its
/// center lands on the origin (periodic wrap), ready for FFT convolution.
pub fn pad_kernel(kernel: &Array2<f64>, rows: usize, cols: usize) -> Array2<f64> {
    let (kr, kc) = kernel.dim();
    let (cr, cc) = (kr / 2, kc / 2);
    let mut out = Array2::zeros((rows, cols));
    for ((a, b), &w) in kernel.indexed_iter() {
        let r = (a + rows * kr - cr) % rows;
        let c = (b + cols * kc - cc) % cols;
        out[[r, c]] += w;
    }
    out
}

/// Adjoint of [`pad_kernel`]: read back the `size x size` window around the origin.
pub fn crop_kernel(plane: &Array2<f64>, size: usize) -> Array2<f64> {
    let (rows, cols) = plane.dim();
    let c = size / 2;
    Array2::from_shape_fn((size, size), |(a, b)| {
        plane[[(a + rows * size - c) % rows, (b + cols * size - c) % cols]]
    })
}
