//! Grayscale raster helpers.
//!
//! Images are `Array2<f32>` indexed `[row, col]` (i.e. `[y, x]`) with values in
//! `[0, 1]`, where `0` is black and `1` is white. Files on disk are 8-bit
//! single-channel PNG (or any other lossless format the `image` crate reads).

use std::path::Path;

use image::{GrayImage as RawGray, ImageReader, Luma};
use ndarray::Array2;

pub type GrayImage = Array2<f32>;

#[derive(Debug, thiserror::Error)]
pub enum ImageIoError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode {path}: {message}")]
    Decode { path: String, message: String },
    #[error("{path} is not 8-bit grayscale (found {found})")]
    NotGray8 { path: String, found: String },
    #[error("cannot encode {path}: {message}")]
    Encode { path: String, message: String },
}

/// Reads an 8-bit grayscale image and scales it to `[0, 1]`.
pub fn read_gray(path: &Path) -> Result<GrayImage, ImageIoError> {
    let reader = ImageReader::open(path).map_err(|source| ImageIoError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = reader.with_guessed_format().map_err(|source| ImageIoError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let img = reader.decode().map_err(|e| ImageIoError::Decode {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let luma = match img {
        image::DynamicImage::ImageLuma8(l) => l,
        other => {
            return Err(ImageIoError::NotGray8 {
                path: path.display().to_string(),
                found: format!("{:?}", other.color()),
            })
        }
    };
    Ok(from_luma(&luma))
}

/// Checks that a file decodes as 8-bit grayscale and returns its `(width, height)`.
pub fn probe_gray(path: &Path) -> Result<(u32, u32), ImageIoError> {
    let img = read_gray(path)?;
    Ok((img.ncols() as u32, img.nrows() as u32))
}

pub fn from_luma(luma: &RawGray) -> GrayImage {
    let (w, h) = luma.dimensions();
    Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        luma.get_pixel(x as u32, y as u32).0[0] as f32 / 255.0
    })
}

pub fn to_luma(img: &GrayImage) -> RawGray {
    let (h, w) = img.dim();
    RawGray::from_fn(w as u32, h as u32, |x, y| Luma([quantize(img[[y as usize, x as usize]])]))
}

/// Maps `[0, 1]` to `0..=255` with round-half-up; out-of-range values saturate.
pub fn quantize(v: f32) -> u8 {
    if !v.is_finite() {
        return 0;
    }
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Writes an 8-bit grayscale image. The container is chosen from the extension.
pub fn write_gray(path: &Path, img: &GrayImage) -> Result<(), ImageIoError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|source| ImageIoError::Io {
            path: parent.display().to_string(),
            source,
        })?;
    }
    to_luma(img).save(path).map_err(|e| ImageIoError::Encode {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Temporary sibling used by [`write_gray_atomic`]; `a/b.png` -> `a/b.partial.png`.
pub fn partial_path(path: &Path) -> std::path::PathBuf {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("png");
    path.with_extension(format!("partial.{ext}"))
}

/// Writes through a temporary sibling and renames, so readers never observe a
/// half-written file.
pub fn write_gray_atomic(path: &Path, img: &GrayImage) -> Result<(), ImageIoError> {
    let tmp = partial_path(path);
    write_gray(&tmp, img)?;
    std::fs::rename(&tmp, path).map_err(|source| ImageIoError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Samples `img` at fractional coordinates with bilinear interpolation.
/// Returns `None` outside `[0, w-1] x [0, h-1]`.
#[inline]
pub fn sample_bilinear(img: &GrayImage, x: f64, y: f64) -> Option<f32> {
    let (h, w) = img.dim();
    if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
        return None;
    }
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let fx = (x - x0 as f64) as f32;
    let fy = (y - y0 as f64) as f32;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    if fx == 0.0 && fy == 0.0 {
        return Some(img[[y0, x0]]);
    }
    let top = img[[y0, x0]] * (1.0 - fx) + img[[y0, x1]] * fx;
    let bottom = img[[y1, x0]] * (1.0 - fx) + img[[y1, x1]] * fx;
    Some(top * (1.0 - fy) + bottom * fy)
}

/// Bilinear resize using pixel-center alignment.
pub fn resize_bilinear(img: &GrayImage, out_h: usize, out_w: usize) -> GrayImage {
    let (h, w) = img.dim();
    if (h, w) == (out_h, out_w) {
        return img.clone();
    }
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
        sample_bilinear(img, fx, fy).unwrap_or(1.0)
    })
}

/// Box-filter downsampling by an integer factor; dimensions must divide evenly.
pub fn downsample(img: &GrayImage, factor: usize) -> GrayImage {
    assert!(factor >= 1);
    let (h, w) = img.dim();
    let (oh, ow) = (h / factor, w / factor);
    let norm = 1.0 / (factor * factor) as f32;
    Array2::from_shape_fn((oh, ow), |(y, x)| {
        let mut acc = 0.0f32;
        for dy in 0..factor {
            for dx in 0..factor {
                acc += img[[y * factor + dy, x * factor + dx]];
            }
        }
        acc * norm
    })
}

/// Central crop (or white padding when the image is smaller) to `size x size`.
pub fn center_fit(img: &GrayImage, size: usize) -> GrayImage {
    let (h, w) = img.dim();
    let oy = h as isize / 2 - size as isize / 2;
    let ox = w as isize / 2 - size as isize / 2;
    Array2::from_shape_fn((size, size), |(y, x)| {
        let sy = y as isize + oy;
        let sx = x as isize + ox;
        if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
            img[[sy as usize, sx as usize]]
        } else {
            1.0
        }
    })
}

/// Separable Gaussian blur with edge clamping.
pub fn gaussian_blur(img: &GrayImage, sigma: f64) -> GrayImage {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32)
        .collect();
    let total: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let (h, w) = img.dim();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let horiz: GrayImage = Array2::from_shape_fn((h, w), |(y, x)| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, kv)| kv * img[[y, clamp(x as isize + k as isize - radius, w)]])
            .sum::<f32>()
    });
    Array2::from_shape_fn((h, w), |(y, x)| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, kv)| kv * horiz[[clamp(y as isize + k as isize - radius, h), x]])
            .sum()
    })
}

/// Hard threshold: `1.0` where `v >= threshold`.
pub fn harden(img: &GrayImage, threshold: f32) -> GrayImage {
    img.mapv(|v| if v >= threshold { 1.0 } else { 0.0 })
}

pub fn is_binary(img: &GrayImage) -> bool {
    img.iter().all(|&v| v == 0.0 || v == 1.0)
}
