//! Image files (PNG, PPM) and the `QKERN 1` kernel text format.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use image::{DynamicImage, ImageReader, RgbImage};
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::image::ColorImage;
use crate::normalize::ScaleVector;
use crate::quat::QuatKernel;

fn read_err(path: &Path, e: impl std::error::Error + Send + Sync + 'static) -> Error {
    Error::Read { path: path.to_path_buf(), source: Box::new(e) }
}

fn write_err(path: &Path, e: impl std::error::Error + Send + Sync + 'static) -> Error {
    Error::Write { path: path.to_path_buf(), source: Box::new(e) }
}

/// Loads an 8- or 16-bit RGB(A) image into `[0, 1]` channels. Alpha is
/// dropped; grayscale input is rejected.
pub fn load_image(path: impl AsRef<Path>) -> Result<ColorImage> {
    let path = path.as_ref();
    let img = ImageReader::open(path)
        .map_err(|e| read_err(path, e))?
        .with_guessed_format()
        .map_err(|e| read_err(path, e))?
        .decode()
        .map_err(|e| read_err(path, e))?;
    if !img.color().has_color() {
        return Err(Error::ColorRequired(path.display().to_string()));
    }
    Ok(from_dynamic(&img))
}

pub fn from_dynamic(img: &DynamicImage) -> ColorImage {
    let rows = img.height() as usize;
    let cols = img.width() as usize;
    if img.color().bytes_per_pixel() / img.color().channel_count() > 1 {
        let buf = img.to_rgb16();
        ColorImage::from_fn(rows, cols, |c, r, k| buf.get_pixel(k as u32, r as u32)[c] as f64 / 65535.0)
    } else {
        let buf = img.to_rgb8();
        ColorImage::from_fn(rows, cols, |c, r, k| buf.get_pixel(k as u32, r as u32)[c] as f64 / 255.0)
    }
}

/// Clamps to `[0, 1]` and quantizes to 8 bits.
pub fn to_rgb8(img: &ColorImage) -> RgbImage {
    let (rows, cols) = img.dim();
    let ch = img.channels();
    RgbImage::from_fn(cols as u32, rows as u32, |x, y| {
        let q = |c: usize| (ch[c][[y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([q(0), q(1), q(2)])
    })
}

/// Saves as 8-bit PNG or PPM, chosen by extension.
pub fn save_image(img: &ColorImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let format = image::ImageFormat::from_path(path).map_err(|e| write_err(path, e))?;
    to_rgb8(img).save_with_format(path, format).map_err(|e| write_err(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelMode {
    Cck,
    QckL1,
    QckNorm,
    Raw,
}

impl KernelMode {
    pub fn as_str(self) -> &'static str {
        match self {
            KernelMode::Cck => "cck",
            KernelMode::QckL1 => "qck-l1",
            KernelMode::QckNorm => "qck-norm",
            KernelMode::Raw => "raw",
        }
    }
}

impl std::str::FromStr for KernelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cck" => Ok(KernelMode::Cck),
            "qck-l1" => Ok(KernelMode::QckL1),
            "qck-norm" => Ok(KernelMode::QckNorm),
            "raw" => Ok(KernelMode::Raw),
            other => Err(Error::KernelFormat(format!("unknown mode {other:?}"))),
        }
    }
}

/// Contents of a kernel file.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelFile {
    pub kernel: QuatKernel,
    pub mode: KernelMode,
    pub t: Option<ScaleVector>,
}

pub fn format_kernel(file: &KernelFile) -> String {
    let s = file.kernel.size();
    let mut out = format!("QKERN 1\nsize {s}\nmode {}\n", file.mode.as_str());
    if let Some(t) = &file.t {
        let _ = writeln!(out, "t {} {} {} {}", t.0[0], t.0[1], t.0[2], t.0[3]);
    }
    for (i, part) in file.kernel.parts().iter().enumerate() {
        let _ = writeln!(out, "Q{i}");
        for row in part.rows() {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
    }
    out
}

fn parse_f64(tok: &str, line: usize) -> Result<f64> {
    tok.parse::<f64>().map_err(|_| Error::KernelFormat(format!("line {line}: bad number {tok:?}")))
}

pub fn parse_kernel(text: &str) -> Result<KernelFile> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty());
    let mut next = |what: &str| lines.next().ok_or_else(|| Error::KernelFormat(format!("missing {what}")));

    let (n, header) = next("header")?;
    if header != "QKERN 1" {
        return Err(Error::KernelFormat(format!("line {n}: expected \"QKERN 1\"")));
    }
    let (n, size_line) = next("size")?;
    let size = size_line
        .strip_prefix("size ")
        .and_then(|v| v.trim().parse::<usize>().ok())
        .ok_or_else(|| Error::KernelFormat(format!("line {n}: expected \"size <s>\"")))?;
    let (n, mode_line) = next("mode")?;
    let mode: KernelMode = mode_line
        .strip_prefix("mode ")
        .ok_or_else(|| Error::KernelFormat(format!("line {n}: expected \"mode <name>\"")))?
        .trim()
        .parse()?;

    let (mut n, mut line) = next("Q0")?;
    let mut t = None;
    if let Some(rest) = line.strip_prefix("t ") {
        let vals = rest.split_whitespace().map(|v| parse_f64(v, n)).collect::<Result<Vec<_>>>()?;
        if vals.len() != 4 {
            return Err(Error::KernelFormat(format!("line {n}: t needs four values")));
        }
        t = Some(ScaleVector([vals[0], vals[1], vals[2], vals[3]]));
        (n, line) = next("Q0")?;
    }

    let mut parts: Vec<Array2<f64>> = Vec::with_capacity(4);
    for i in 0..4 {
        if i > 0 {
            (n, line) = next(&format!("Q{i}"))?;
        }
        if line != format!("Q{i}") {
            return Err(Error::KernelFormat(format!("line {n}: expected \"Q{i}\"")));
        }
        let mut data = Vec::with_capacity(size * size);
        for _ in 0..size {
            let (n, row) = next(&format!("Q{i} row"))?;
            let vals = row.split_whitespace().map(|v| parse_f64(v, n)).collect::<Result<Vec<_>>>()?;
            if vals.len() != size {
                return Err(Error::KernelFormat(format!("line {n}: expected {size} values, got {}", vals.len())));
            }
            data.extend(vals);
        }
        parts.push(Array2::from_shape_vec((size, size), data).expect("size checked"));
    }
    if let Some((n, _)) = lines.next() {
        return Err(Error::KernelFormat(format!("line {n}: trailing content")));
    }
    let parts: [Array2<f64>; 4] = parts.try_into().expect("four parts");
    Ok(KernelFile { kernel: QuatKernel::new(parts)?, mode, t })
}

pub fn save_kernel(file: &KernelFile, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_kernel(file)).map_err(|e| write_err(path, e))
}

pub fn load_kernel(path: impl AsRef<Path>) -> Result<KernelFile> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| read_err(path, e))?;
    parse_kernel(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_kernel(seed: u64) -> QuatKernel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let parts = std::array::from_fn(|_| Array2::from_shape_fn((5, 5), |_| rng.random_range(-1.0..1.0) * 1e-3));
        QuatKernel::new(parts).unwrap()
    }

    #[test]
    fn kernel_text_round_trip_is_exact() {
        let file = KernelFile {
            kernel: random_kernel(3),
            mode: KernelMode::QckNorm,
            t: Some(ScaleVector([0.1 + 0.2, 1.0 / 3.0, -2.5e-17, 7.0])),
        };
        let text = format_kernel(&file);
        assert!(text.starts_with("QKERN 1\nsize 5\nmode qck-norm\nt "));
        assert_eq!(parse_kernel(&text).unwrap(), file);
        let raw = KernelFile { t: None, mode: KernelMode::Raw, ..file };
        assert_eq!(parse_kernel(&format_kernel(&raw)).unwrap(), raw);
    }

    #[test]
    fn malformed_kernel_files() {
        assert!(parse_kernel("QKERN 2\n").is_err());
        assert!(parse_kernel("QKERN 1\nsize 3\nmode blur\n").is_err());
        let good = format_kernel(&KernelFile { kernel: QuatKernel::identity(3), mode: KernelMode::Raw, t: None });
        assert!(parse_kernel(&good.replace("Q2", "Q5")).is_err());
        assert!(parse_kernel(&good.replacen("0 0 0", "0 0", 1)).is_err());
        assert!(parse_kernel(&format!("{good}1\n")).is_err());
    }

    #[test]
    fn image_round_trip_png_and_ppm() {
        let dir = tempfile::tempdir().unwrap();
        let img = ColorImage::from_fn(5, 7, |c, r, k| ((c * 31 + r * 7 + k * 3) % 256) as f64 / 255.0);
        for name in ["a.png", "a.ppm"] {
            let p = dir.path().join(name);
            save_image(&img, &p).unwrap();
            assert_eq!(load_image(&p).unwrap(), img);
        }
    }

    #[test]
    fn grayscale_and_missing_inputs_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        image::GrayImage::from_pixel(4, 4, image::Luma([9])).save(&p).unwrap();
        assert!(matches!(load_image(&p), Err(Error::ColorRequired(_))));
        let missing = dir.path().join("nope.png");
        let err = load_image(&missing).unwrap_err();
        assert!(err.to_string().contains("nope.png"));
    }

    #[test]
    fn sixteen_bit_input() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.png");
        image::ImageBuffer::<image::Rgb<u16>, _>::from_pixel(2, 2, image::Rgb([65535u16, 0, 32768])).save(&p).unwrap();
        let img = load_image(&p).unwrap();
        assert_eq!(img.channel(0)[[0, 0]], 1.0);
        assert!((img.channel(2)[[1, 1]] - 32768.0 / 65535.0).abs() < 1e-15);
    }
}
