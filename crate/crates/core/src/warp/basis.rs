use std::f64::consts::PI;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::field::{FieldRepr, VectorField};
use super::WarpError;
use crate::seed::rng_from;

pub const ORTHONORMAL_TOL: f64 = 1e-6;
/// Highest cosine index per axis: `cos(pi * 6 * u)` completes 3 cycles over `u in [0, 1]`.
const MAX_COS_INDEX: usize = 6;

/// Statistical deformation model: `d = mean + sum_i c_i * sqrt(lambda_i) * e_i`
/// over a `grid_h x grid_w` control grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationBasis {
    grid_w: usize,
    grid_h: usize,
    mean_field: VectorField,
    eigen_fields: Vec<VectorField>,
    eigenvalues: Vec<f64>,
}

impl DeformationBasis {
    /// Validates ordering, non-negativity and orthonormality.
    pub fn new(
        grid_w: usize,
        grid_h: usize,
        mean_field: VectorField,
        eigen_fields: Vec<VectorField>,
        eigenvalues: Vec<f64>,
    ) -> Result<Self, WarpError> {
        let b = Self { grid_w, grid_h, mean_field, eigen_fields, eigenvalues };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), WarpError> {
        let err = |m: String| Err(WarpError::Basis(m));
        let t = self.eigen_fields.len();
        if t < 2 {
            return err(format!("need at least 2 eigen-fields, got {t}"));
        }
        if self.eigenvalues.len() != t {
            return err(format!("{} eigenvalues for {t} eigen-fields", self.eigenvalues.len()));
        }
        let dims = (self.grid_h, self.grid_w);
        if self.mean_field.dim() != dims || self.eigen_fields.iter().any(|e| e.dim() != dims) {
            return err("field shape does not match grid".into());
        }
        if !self.mean_field.is_finite() || self.eigen_fields.iter().any(|e| !e.is_finite()) {
            return err("non-finite field entries".into());
        }
        if self.eigenvalues.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return err("eigenvalues must be finite and non-negative".into());
        }
        if self.eigenvalues.windows(2).any(|w| w[0] < w[1]) {
            return err("eigenvalues must be in descending order".into());
        }
        for i in 0..t {
            for j in i..t {
                let expect = if i == j { 1.0 } else { 0.0 };
                let got = self.eigen_fields[i].dot(&self.eigen_fields[j]);
                if (got - expect).abs() > ORTHONORMAL_TOL {
                    return err(format!("<e_{i}, e_{j}> = {got}, expected {expect}"));
                }
            }
        }
        Ok(())
    }

    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    pub fn t(&self) -> usize {
        self.eigen_fields.len()
    }

    pub fn mean_field(&self) -> &VectorField {
        &self.mean_field
    }

    pub fn eigen_fields(&self) -> &[VectorField] {
        &self.eigen_fields
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn save(&self, path: &Path) -> Result<(), WarpError> {
        let repr = BasisFile {
            grid_w: self.grid_w,
            grid_h: self.grid_h,
            t: self.t(),
            mean_field: (&self.mean_field).into(),
            eigen_fields: self.eigen_fields.iter().map(Into::into).collect(),
            eigenvalues: self.eigenvalues.clone(),
        };
        let text = serde_json::to_string(&repr).map_err(|e| WarpError::Io(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| WarpError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, WarpError> {
        let text = std::fs::read_to_string(path).map_err(|e| WarpError::Io(format!("{}: {e}", path.display())))?;
        let repr: BasisFile = serde_json::from_str(&text).map_err(|e| WarpError::Basis(e.to_string()))?;
        if repr.t != repr.eigen_fields.len() {
            return Err(WarpError::Basis(format!("header t={} but {} fields stored", repr.t, repr.eigen_fields.len())));
        }
        let (h, w) = (repr.grid_h, repr.grid_w);
        let shape_err = || WarpError::Basis("field length does not match grid".into());
        let mean = repr.mean_field.into_field(h, w).ok_or_else(shape_err)?;
        let eig = repr
            .eigen_fields
            .into_iter()
            .map(|f| f.into_field(h, w).ok_or_else(shape_err))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(w, h, mean, eig, repr.eigenvalues)
    }
}

#[derive(Serialize, Deserialize)]
struct BasisFile {
    grid_w: usize,
    grid_h: usize,
    t: usize,
    mean_field: FieldRepr,
    eigen_fields: Vec<FieldRepr>,
    eigenvalues: Vec<f64>,
}

/// Knobs for the stand-in basis generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthBasisConfig {
    /// `lambda_{i+1} / lambda_i`.
    pub ratio: f64,
    /// RMS per-node displacement (px) of `sqrt(lambda_1) * e_1`.
    pub rms_displacement_px: f64,
    /// Peak magnitude of the mean field (px); must stay within 2.
    pub mean_max_px: f64,
}

impl Default for SynthBasisConfig {
    fn default() -> Self {
        Self { ratio: 0.5, rms_displacement_px: 4.0, mean_max_px: 1.5 }
    }
}

pub fn synthesize_basis(grid_w: usize, grid_h: usize, t: usize, seed: u64) -> Result<DeformationBasis, WarpError> {
    synthesize_basis_with(grid_w, grid_h, t, seed, SynthBasisConfig::default())
}

/// Smooth random eigen-fields from a truncated 2-D cosine series,
/// orthonormalized with modified Gram-Schmidt, with geometric eigenvalues.
pub fn synthesize_basis_with(
    grid_w: usize,
    grid_h: usize,
    t: usize,
    seed: u64,
    cfg: SynthBasisConfig,
) -> Result<DeformationBasis, WarpError> {
    if t < 2 {
        return Err(WarpError::Basis(format!("t must be >= 2, got {t}")));
    }
    if grid_w < 4 || grid_h < 4 {
        return Err(WarpError::Basis(format!("grid must be at least 4x4, got {grid_w}x{grid_h}")));
    }
    let span = 2 * (MAX_COS_INDEX + 1).min(grid_w) * (MAX_COS_INDEX + 1).min(grid_h);
    if t > span {
        return Err(WarpError::Basis(format!("t={t} exceeds the {span}-dimensional smooth field space")));
    }
    if !(cfg.ratio > 0.0 && cfg.ratio < 1.0) || cfg.mean_max_px > 2.0 || cfg.mean_max_px < 0.0 {
        return Err(WarpError::Basis("invalid synthesis config".into()));
    }
    let mut rng = rng_from(seed);
    let mut normal = move || -> f64 { StandardNormal.sample(&mut rng) };

    let mut basis: Vec<VectorField> = Vec::with_capacity(t);
    let mut attempts = 0;
    while basis.len() < t {
        attempts += 1;
        if attempts > 50 * t {
            return Err(WarpError::Basis("could not draw independent fields".into()));
        }
        let mut f = cosine_field(grid_w, grid_h, MAX_COS_INDEX, &mut normal);
        let n0 = f.norm();
        // two passes of modified Gram-Schmidt keep orthogonality near machine precision
        for _ in 0..2 {
            for e in &basis {
                let p = f.dot(e);
                f.axpy(-p, e);
            }
        }
        let n = f.norm();
        if n < 1e-6 * n0 {
            continue;
        }
        f.scale(1.0 / n);
        basis.push(f);
    }

    let entries = (2 * grid_w * grid_h) as f64;
    let lambda1 = entries * cfg.rms_displacement_px * cfg.rms_displacement_px;
    let eigenvalues: Vec<f64> = (0..t).map(|i| lambda1 * cfg.ratio.powi(i as i32)).collect();

    let mut mean = cosine_field(grid_w, grid_h, 1, &mut normal);
    let peak = mean.max_magnitude();
    if peak > 0.0 {
        mean.scale(cfg.mean_max_px / peak);
    }
    DeformationBasis::new(grid_w, grid_h, mean, basis, eigenvalues)
}

fn cosine_field(grid_w: usize, grid_h: usize, max_k: usize, normal: &mut impl FnMut() -> f64) -> VectorField {
    let mut f = VectorField::zeros(grid_h, grid_w);
    for channel in 0..2 {
        let target = if channel == 0 { &mut f.dx } else { &mut f.dy };
        for ky in 0..=max_k {
            for kx in 0..=max_k {
                let a = normal() / (1.0 + (kx * kx + ky * ky) as f64);
                for ((y, x), v) in target.indexed_iter_mut() {
                    let u = if grid_w > 1 { x as f64 / (grid_w - 1) as f64 } else { 0.0 };
                    let w = if grid_h > 1 { y as f64 / (grid_h - 1) as f64 } else { 0.0 };
                    *v += a * (PI * kx as f64 * u).cos() * (PI * ky as f64 * w).cos();
                }
            }
        }
    }
    f
}

/// Coefficients, the grid-level field, and its dense upsampling.
#[derive(Debug, Clone, PartialEq)]
pub struct DistortionSample {
    pub coefficients: Vec<f64>,
    pub grid_field: VectorField,
    pub field: VectorField,
}

impl DistortionSample {
    pub fn zero(height: usize, width: usize) -> Self {
        Self {
            coefficients: Vec::new(),
            grid_field: VectorField::zeros(2, 2),
            field: VectorField::zeros(height, width),
        }
    }
}

/// `grid = mean + sum_i c_i * sqrt(lambda_i) * e_i`, upsampled bilinearly to `out_h x out_w`.
pub fn compose_distortion_field(
    basis: &DeformationBasis,
    coefficients: &[f64],
    out_w: usize,
    out_h: usize,
) -> Result<DistortionSample, WarpError> {
    if coefficients.len() != basis.t() {
        return Err(WarpError::Basis(format!(
            "{} coefficients for a basis with t={}",
            coefficients.len(),
            basis.t()
        )));
    }
    let mut grid = basis.mean_field.clone();
    for ((c, e), lambda) in coefficients.iter().zip(&basis.eigen_fields).zip(&basis.eigenvalues) {
        if *c != 0.0 {
            grid.axpy(c * lambda.sqrt(), e);
        }
    }
    let field = grid.upsample(out_h, out_w);
    Ok(DistortionSample { coefficients: coefficients.to_vec(), grid_field: grid, field })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthesized_basis_is_orthonormal_and_geometric() {
        let b = synthesize_basis(16, 16, 6, 42).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((b.eigen_fields()[i].dot(&b.eigen_fields()[j]) - expect).abs() < 1e-6);
            }
        }
        for w in b.eigenvalues().windows(2) {
            assert!(w[1] < w[0]);
            assert!((w[1] / w[0] - 0.5).abs() < 1e-12);
        }
        assert!(b.mean_field().max_magnitude() <= 2.0);
    }

    #[test]
    fn synthesis_is_deterministic() {
        let a = synthesize_basis(16, 16, 4, 5).unwrap();
        let b = synthesize_basis(16, 16, 4, 5).unwrap();
        assert_eq!(a, b);
        let c = synthesize_basis(16, 16, 4, 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn too_few_fields_is_an_error() {
        assert!(matches!(synthesize_basis(16, 16, 1, 0), Err(WarpError::Basis(_))));
        assert!(synthesize_basis(3, 16, 2, 0).is_err());
    }

    #[test]
    fn small_grid_saturates_field_space() {
        assert!(synthesize_basis(4, 4, 32, 0).is_ok());
        assert!(synthesize_basis(4, 4, 33, 0).is_err());
    }

    #[test]
    fn coefficient_count_must_match() {
        let b = synthesize_basis(8, 8, 3, 0).unwrap();
        assert!(compose_distortion_field(&b, &[1.0, 2.0], 32, 32).is_err());
    }

    #[test]
    fn file_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("basis.json");
        let b = synthesize_basis(16, 12, 4, 11).unwrap();
        b.save(&p).unwrap();
        assert_eq!(DeformationBasis::load(&p).unwrap(), b);
    }

    #[test]
    fn loading_rejects_unordered_eigenvalues() {
        let b = synthesize_basis(8, 8, 3, 1).unwrap();
        let mut ev = b.eigenvalues().to_vec();
        ev.swap(0, 2);
        let r = DeformationBasis::new(8, 8, b.mean_field().clone(), b.eigen_fields().to_vec(), ev);
        assert!(r.is_err());
    }
}
