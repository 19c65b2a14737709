//! Blind deconvolution of color images with quaternion convolution kernels.

pub mod error;
pub mod fft;
pub mod image;
pub mod io;
pub mod kernel;
pub mod latent;
pub mod metrics;
pub mod normalize;
pub mod pipeline;
pub mod quat;
pub mod render;
pub mod synth;

pub use error::{Error, Result};
pub use image::{ColorImage, GradientField, Pyramid};
pub use quat::{Boundary, QuatImage, QuatKernel};
