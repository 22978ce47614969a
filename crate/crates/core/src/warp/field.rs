use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Two-channel displacement field in pixels, indexed `[y, x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    pub dx: Array2<f64>,
    pub dy: Array2<f64>,
}

impl VectorField {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { dx: Array2::zeros((height, width)), dy: Array2::zeros((height, width)) }
    }

    pub fn height(&self) -> usize {
        self.dx.nrows()
    }

    pub fn width(&self) -> usize {
        self.dx.ncols()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.dx.dim()
    }

    /// Flattened inner product over both channels.
    pub fn dot(&self, other: &VectorField) -> f64 {
        self.dx.iter().zip(other.dx.iter()).map(|(a, b)| a * b).sum::<f64>()
            + self.dy.iter().zip(other.dy.iter()).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &VectorField) {
        self.dx.scaled_add(alpha, &other.dx);
        self.dy.scaled_add(alpha, &other.dy);
    }

    pub fn scale(&mut self, alpha: f64) {
        self.dx.mapv_inplace(|v| v * alpha);
        self.dy.mapv_inplace(|v| v * alpha);
    }

    pub fn max_magnitude(&self) -> f64 {
        self.dx.iter().zip(self.dy.iter()).map(|(a, b)| a.hypot(*b)).fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.dx.iter().chain(self.dy.iter()).all(|v| v.is_finite())
    }

    /// `[dx row-major..., dy row-major...]`
    pub fn to_flat(&self) -> Vec<f64> {
        self.dx.iter().chain(self.dy.iter()).copied().collect()
    }

    pub fn from_flat(height: usize, width: usize, flat: &[f64]) -> Option<Self> {
        let n = height * width;
        if flat.len() != 2 * n {
            return None;
        }
        Some(Self {
            dx: Array2::from_shape_vec((height, width), flat[..n].to_vec()).ok()?,
            dy: Array2::from_shape_vec((height, width), flat[n..].to_vec()).ok()?,
        })
    }

    /// Bilinear upsampling with corner alignment: grid node `(0, 0)` lands on
    /// pixel `(0, 0)` and node `(w-1, h-1)` on pixel `(out_w-1, out_h-1)`.
    pub fn upsample(&self, out_h: usize, out_w: usize) -> VectorField {
        VectorField { dx: upsample_channel(&self.dx, out_h, out_w), dy: upsample_channel(&self.dy, out_h, out_w) }
    }

    /// Bilinear sample at fractional pixel coordinates with edge clamping.
    pub fn sample(&self, x: f64, y: f64) -> (f64, f64) {
        (sample_clamped(&self.dx, x, y), sample_clamped(&self.dy, x, y))
    }
}

fn grid_coord(i: usize, out_n: usize, grid_n: usize) -> f64 {
    if out_n <= 1 || grid_n <= 1 {
        0.0
    } else {
        i as f64 * (grid_n - 1) as f64 / (out_n - 1) as f64
    }
}

fn upsample_channel(grid: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (gh, gw) = grid.dim();
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        sample_clamped(grid, grid_coord(x, out_w, gw), grid_coord(y, out_h, gh))
    })
}

pub(crate) fn sample_clamped(a: &Array2<f64>, x: f64, y: f64) -> f64 {
    let (h, w) = a.dim();
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let top = a[[y0, x0]] * (1.0 - fx) + a[[y0, x1]] * fx;
    let bottom = a[[y1, x0]] * (1.0 - fx) + a[[y1, x1]] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Serialized form: dimensions plus flattened channels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct FieldRepr {
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
}

impl From<&VectorField> for FieldRepr {
    fn from(f: &VectorField) -> Self {
        Self { dx: f.dx.iter().copied().collect(), dy: f.dy.iter().copied().collect() }
    }
}

impl FieldRepr {
    pub fn into_field(self, height: usize, width: usize) -> Option<VectorField> {
        Some(VectorField {
            dx: Array2::from_shape_vec((height, width), self.dx).ok()?,
            dy: Array2::from_shape_vec((height, width), self.dy).ok()?,
        })
    }
}
