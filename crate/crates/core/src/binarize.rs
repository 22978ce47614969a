//! Classical ridge binarization: local-mean adaptive threshold, 3x3 median
//! despeckle, and a local-variance foreground mask.
//!
//! Output maps mark ridges with `1` and valleys/background with `0`. Images
//! consumed by the generator stages use the display polarity instead (dark
//! ridge `0` on white `1`); see [`to_display_polarity`].

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::image::GrayImage;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassicalParams {
    pub window: usize,
    pub offset: f64,
    pub min_variance: f64,
}

impl Default for ClassicalParams {
    fn default() -> Self {
        Self { window: 25, offset: 0.02, min_variance: 1e-4 }
    }
}

/// Anything that maps a grayscale impression to a ridge map in `[0, 1]`.
pub trait RidgeBinarizer: Sync {
    fn ridge_map(&self, gray: &GrayImage) -> GrayImage;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ClassicalBinarizer {
    pub params: ClassicalParams,
}

impl RidgeBinarizer for ClassicalBinarizer {
    fn ridge_map(&self, gray: &GrayImage) -> GrayImage {
        classical_binarize_with(gray, &self.params)
    }
}

pub fn classical_binarize(gray: &GrayImage) -> GrayImage {
    classical_binarize_with(gray, &ClassicalParams::default())
}

pub fn classical_binarize_with(gray: &GrayImage, p: &ClassicalParams) -> GrayImage {
    let (h, w) = gray.dim();
    if h == 0 || w == 0 {
        return gray.clone();
    }
    let stats = LocalStats::new(gray, p.window);
    let raw = Array2::from_shape_fn((h, w), |(y, x)| {
        let (mean, _) = stats.at(y, x);
        (gray[[y, x]] as f64) < mean - p.offset
    });
    let despeckled = median3(&raw);
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (_, var) = stats.at(y, x);
        if despeckled[[y, x]] && var >= p.min_variance {
            1.0
        } else {
            0.0
        }
    })
}

/// `true` where local variance reaches `min_variance`.
pub fn foreground_mask(gray: &GrayImage, p: &ClassicalParams) -> Array2<bool> {
    let (h, w) = gray.dim();
    let stats = LocalStats::new(gray, p.window);
    Array2::from_shape_fn((h, w), |(y, x)| stats.at(y, x).1 >= p.min_variance)
}

/// Converts a ridge map (ridge = 1) to display polarity (ridge = 0, white background).
pub fn to_display_polarity(ridges: &GrayImage) -> GrayImage {
    ridges.mapv(|v| 1.0 - v)
}

/// Box-window mean and variance from summed-area tables; windows are clipped
/// at the border.
struct LocalStats {
    sum: Array2<f64>,
    sq: Array2<f64>,
    half: usize,
}

impl LocalStats {
    fn new(gray: &GrayImage, window: usize) -> Self {
        let (h, w) = gray.dim();
        let mut sum = Array2::<f64>::zeros((h + 1, w + 1));
        let mut sq = Array2::<f64>::zeros((h + 1, w + 1));
        for y in 0..h {
            for x in 0..w {
                let v = gray[[y, x]] as f64;
                sum[[y + 1, x + 1]] = v + sum[[y, x + 1]] + sum[[y + 1, x]] - sum[[y, x]];
                sq[[y + 1, x + 1]] = v * v + sq[[y, x + 1]] + sq[[y + 1, x]] - sq[[y, x]];
            }
        }
        Self { sum, sq, half: window / 2 }
    }

    fn at(&self, y: usize, x: usize) -> (f64, f64) {
        let (hp, wp) = self.sum.dim();
        let y0 = y.saturating_sub(self.half);
        let x0 = x.saturating_sub(self.half);
        let y1 = (y + self.half + 1).min(hp - 1);
        let x1 = (x + self.half + 1).min(wp - 1);
        let n = ((y1 - y0) * (x1 - x0)) as f64;
        let rect = |t: &Array2<f64>| t[[y1, x1]] - t[[y0, x1]] - t[[y1, x0]] + t[[y0, x0]];
        let mean = rect(&self.sum) / n;
        let var = (rect(&self.sq) / n - mean * mean).max(0.0);
        (mean, var)
    }
}

/// 3x3 binary median (majority of 9) with edge replication.
fn median3(a: &Array2<bool>) -> Array2<bool> {
    let (h, w) = a.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut count = 0;
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                count += a[[yy, xx]] as u32;
            }
        }
        count >= 5
    })
}
