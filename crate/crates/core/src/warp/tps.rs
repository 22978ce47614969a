//! Thin-plate-spline fitting, and a PCA route from landmark displacement
//! sets to a [`DeformationBasis`] for externally supplied distortion data.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::field::VectorField;
use super::{DeformationBasis, WarpError};

#[inline]
fn radial(r2: f64) -> f64 {
    if r2 <= 0.0 {
        0.0
    } else {
        r2 * r2.ln() * 0.5
    }
}

/// Scalar thin-plate spline `f(p) = a0 + a1 x + a2 y + sum_i w_i U(|p - p_i|)`
/// with `U(r) = r^2 log r`.
#[derive(Debug, Clone)]
pub struct ThinPlateSpline {
    centers: Vec<[f64; 2]>,
    weights: Vec<f64>,
    affine: [f64; 3],
}

impl ThinPlateSpline {
    /// Solves the interpolation system; `smoothing > 0` relaxes exact interpolation.
    pub fn fit(centers: &[[f64; 2]], values: &[f64], smoothing: f64) -> Result<Self, WarpError> {
        let n = centers.len();
        if n < 3 || values.len() != n {
            return Err(WarpError::Basis(format!("TPS needs >= 3 landmarks with values, got {n}")));
        }
        let m = n + 3;
        let mut a = DMatrix::<f64>::zeros(m, m);
        for i in 0..n {
            for j in 0..n {
                let dx = centers[i][0] - centers[j][0];
                let dy = centers[i][1] - centers[j][1];
                a[(i, j)] = radial(dx * dx + dy * dy);
            }
            a[(i, i)] += smoothing;
            let row = [1.0, centers[i][0], centers[i][1]];
            for (k, v) in row.iter().enumerate() {
                a[(i, n + k)] = *v;
                a[(n + k, i)] = *v;
            }
        }
        let mut b = DVector::<f64>::zeros(m);
        for (i, v) in values.iter().enumerate() {
            b[i] = *v;
        }
        let sol = a
            .lu()
            .solve(&b)
            .ok_or_else(|| WarpError::Basis("singular TPS system (collinear or repeated landmarks?)".into()))?;
        Ok(Self {
            centers: centers.to_vec(),
            weights: sol.rows(0, n).iter().copied().collect(),
            affine: [sol[n], sol[n + 1], sol[n + 2]],
        })
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        let mut v = self.affine[0] + self.affine[1] * x + self.affine[2] * y;
        for (c, w) in self.centers.iter().zip(&self.weights) {
            let dx = x - c[0];
            let dy = y - c[1];
            v += w * radial(dx * dx + dy * dy);
        }
        v
    }
}

/// One observed distortion: landmark positions (image px) and their displacements.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LandmarkDisplacements {
    pub points: Vec<[f64; 2]>,
    pub displacements: Vec<[f64; 2]>,
}

/// Fits a TPS per sample, evaluates it on the control grid, and keeps the
/// `t` leading principal components (eigenvalues are sample variances).
pub fn basis_from_landmarks(
    samples: &[LandmarkDisplacements],
    grid_w: usize,
    grid_h: usize,
    image_w: usize,
    image_h: usize,
    t: usize,
) -> Result<DeformationBasis, WarpError> {
    let n = samples.len();
    if t < 2 || n < t + 1 {
        return Err(WarpError::Basis(format!("need t >= 2 and at least t+1 samples (t={t}, samples={n})")));
    }
    let dim = 2 * grid_w * grid_h;
    let node = |i: usize, n_grid: usize, n_img: usize| -> f64 {
        if n_grid <= 1 {
            0.0
        } else {
            i as f64 * (n_img as f64 - 1.0) / (n_grid as f64 - 1.0)
        }
    };
    let mut data = DMatrix::<f64>::zeros(n, dim);
    for (s, sample) in samples.iter().enumerate() {
        if sample.points.len() != sample.displacements.len() {
            return Err(WarpError::Basis(format!("sample {s}: points/displacements length mismatch")));
        }
        let xs: Vec<f64> = sample.displacements.iter().map(|d| d[0]).collect();
        let ys: Vec<f64> = sample.displacements.iter().map(|d| d[1]).collect();
        let fx = ThinPlateSpline::fit(&sample.points, &xs, 0.0)?;
        let fy = ThinPlateSpline::fit(&sample.points, &ys, 0.0)?;
        let mut field = VectorField::zeros(grid_h, grid_w);
        for gy in 0..grid_h {
            for gx in 0..grid_w {
                let (px, py) = (node(gx, grid_w, image_w), node(gy, grid_h, image_h));
                field.dx[[gy, gx]] = fx.eval(px, py);
                field.dy[[gy, gx]] = fy.eval(px, py);
            }
        }
        for (k, v) in field.to_flat().into_iter().enumerate() {
            data[(s, k)] = v;
        }
    }
    let mean: Vec<f64> = (0..dim).map(|k| data.column(k).mean()).collect();
    for k in 0..dim {
        for s in 0..n {
            data[(s, k)] -= mean[k];
        }
    }
    let svd = data.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| WarpError::Basis("SVD failed".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut fields = Vec::with_capacity(t);
    let mut eigenvalues = Vec::with_capacity(t);
    for &i in order.iter().take(t) {
        let s = svd.singular_values[i];
        eigenvalues.push(s * s / (n as f64 - 1.0));
        let row: Vec<f64> = v_t.row(i).iter().copied().collect();
        fields.push(VectorField::from_flat(grid_h, grid_w, &row).expect("row has grid length"));
    }
    let mean_field = VectorField::from_flat(grid_h, grid_w, &mean).expect("mean has grid length");
    DeformationBasis::new(grid_w, grid_h, mean_field, fields, eigenvalues)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from;
    use rand::Rng;

    #[test]
    fn tps_interpolates_landmarks() {
        let pts = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0], [10.0, 10.0], [5.0, 4.0]];
        let vals = [1.0, -2.0, 0.5, 3.0, 7.0];
        let tps = ThinPlateSpline::fit(&pts, &vals, 0.0).unwrap();
        for (p, v) in pts.iter().zip(vals) {
            assert!((tps.eval(p[0], p[1]) - v).abs() < 1e-9);
        }
    }

    #[test]
    fn tps_reproduces_affine_functions() {
        let pts = [[0.0, 0.0], [7.0, 1.0], [2.0, 9.0], [8.0, 8.0]];
        let f = |x: f64, y: f64| 0.5 + 2.0 * x - 3.0 * y;
        let vals: Vec<f64> = pts.iter().map(|p| f(p[0], p[1])).collect();
        let tps = ThinPlateSpline::fit(&pts, &vals, 0.0).unwrap();
        assert!((tps.eval(3.3, 4.4) - f(3.3, 4.4)).abs() < 1e-9);
    }

    #[test]
    fn pca_basis_from_landmarks_is_valid() {
        let mut rng = rng_from(3);
        let pts: Vec<[f64; 2]> = (0..12).map(|_| [rng.random::<f64>() * 255.0, rng.random::<f64>() * 255.0]).collect();
        let samples: Vec<_> = (0..10)
            .map(|_| {
                let a: f64 = rng.random::<f64>() - 0.5;
                let b: f64 = rng.random::<f64>() - 0.5;
                LandmarkDisplacements {
                    points: pts.clone(),
                    displacements: pts.iter().map(|p| [a * p[1] / 50.0, b * p[0] / 50.0 + a]).collect(),
                }
            })
            .collect();
        let basis = basis_from_landmarks(&samples, 8, 8, 256, 256, 2).unwrap();
        assert_eq!(basis.t(), 2);
        assert!(basis.eigenvalues()[0] >= basis.eigenvalues()[1]);
        assert!(basis.eigenvalues()[0] > 0.0);
    }

    #[test]
    fn too_few_samples_is_an_error() {
        let s = LandmarkDisplacements { points: vec![[0.0, 0.0]; 3], displacements: vec![[0.0, 0.0]; 3] };
        assert!(basis_from_landmarks(&[s.clone(), s], 8, 8, 64, 64, 2).is_err());
    }
}
