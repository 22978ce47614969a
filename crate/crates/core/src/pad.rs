//! Presentation-attack detection helpers independent of any network:
//! minutia-centered patches and two-branch score fusion.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::image::GrayImage;
use crate::minutiae::Minutia;

pub const PATCH_SIZE: usize = 96;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PatchError {
    #[error("no minutiae to center patches on")]
    EmptyPatchSet,
    #[error("minutia at ({x}, {y}) lies outside a {w}x{h} image")]
    OutOfBounds { x: usize, y: usize, w: usize, h: usize },
}

/// Square crop centered on `(cx, cy)`; out-of-range pixels repeat the nearest edge.
pub fn centered_patch(image: &GrayImage, cx: usize, cy: usize, size: usize) -> GrayImage {
    let (h, w) = image.dim();
    let x0 = cx as isize - (size / 2) as isize;
    let y0 = cy as isize - (size / 2) as isize;
    Array2::from_shape_fn((size, size), |(r, c)| {
        let y = (y0 + r as isize).clamp(0, h as isize - 1) as usize;
        let x = (x0 + c as isize).clamp(0, w as isize - 1) as usize;
        image[[y, x]]
    })
}

/// Patches around the `max_patches` highest-quality minutiae, best first
/// (ties keep input order).
pub fn extract_minutiae_patches(
    image: &GrayImage,
    minutiae: &[Minutia],
    size: usize,
    max_patches: usize,
) -> Result<Vec<GrayImage>, PatchError> {
    if minutiae.is_empty() {
        return Err(PatchError::EmptyPatchSet);
    }
    let (h, w) = image.dim();
    if let Some(m) = minutiae.iter().find(|m| m.x >= w || m.y >= h) {
        return Err(PatchError::OutOfBounds { x: m.x, y: m.y, w, h });
    }
    let mut order: Vec<&Minutia> = minutiae.iter().collect();
    order.sort_by(|a, b| b.quality.total_cmp(&a.quality));
    Ok(order.into_iter().take(max_patches).map(|m| centered_patch(image, m.x, m.y, size)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub w_patch: f64,
    pub w_whole: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { w_patch: 0.8, w_whole: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("fusion weights must be non-negative and sum to 1, got ({w_patch}, {w_whole})")]
pub struct FusionError {
    pub w_patch: f64,
    pub w_whole: f64,
}

impl FusionConfig {
    pub fn new(w_patch: f64, w_whole: f64) -> Result<Self, FusionError> {
        let c = Self { w_patch, w_whole };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), FusionError> {
        let ok = self.w_patch >= 0.0 && self.w_whole >= 0.0 && (self.w_patch + self.w_whole - 1.0).abs() < 1e-12;
        if ok {
            Ok(())
        } else {
            Err(FusionError { w_patch: self.w_patch, w_whole: self.w_whole })
        }
    }

    /// Weighted sum of the two branch scores, clamped to the branch range so
    /// rounding never leaves the convex hull (equal scores fuse to themselves).
    pub fn fuse(&self, patch_score: f64, whole_score: f64) -> f64 {
        let lo = patch_score.min(whole_score);
        let hi = patch_score.max(whole_score);
        (self.w_patch * patch_score + self.w_whole * whole_score).clamp(lo, hi)
    }

    /// Mean of the patch scores fused with the whole-image score; with no
    /// patches the whole-image score is returned unchanged.
    pub fn fuse_patches(&self, patch_scores: &[f64], whole_score: f64) -> f64 {
        if patch_scores.is_empty() {
            return whole_score;
        }
        let mean = patch_scores.iter().sum::<f64>() / patch_scores.len() as f64;
        self.fuse(mean, whole_score)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::minutiae::MinutiaKind;

    fn m(x: usize, y: usize, q: f64) -> Minutia {
        Minutia { x, y, theta: 0.0, kind: MinutiaKind::Ending, quality: q }
    }

    fn ramp(n: usize) -> GrayImage {
        Array2::from_shape_fn((n, n), |(y, x)| ((y * n + x) % 251) as f32 / 250.0)
    }

    #[test]
    fn center_minutia_gives_central_crop() {
        let img = ramp(512);
        let p = extract_minutiae_patches(&img, &[m(256, 256, 1.0)], 96, 1).unwrap();
        assert_eq!(p[0], img.slice(ndarray::s![208..304, 208..304]).to_owned());
    }

    #[test]
    fn border_minutia_still_gives_full_patch() {
        let img = ramp(200);
        let p = extract_minutiae_patches(&img, &[m(10, 190, 1.0)], 96, 1).unwrap();
        assert_eq!(p[0].dim(), (96, 96));
        assert_eq!(p[0][[0, 0]], img[[190 - 48, 0]]);
        assert_eq!(p[0][[95, 95]], img[[199, 10 + 47]]);
    }

    #[test]
    fn keeps_highest_quality() {
        let img = ramp(300);
        let ms: Vec<_> = (0..50).map(|i| m(20 + i * 5, 150, ((i * 37) % 50) as f64)).collect();
        let p = extract_minutiae_patches(&img, &ms, 96, 20).unwrap();
        assert_eq!(p.len(), 20);
        let mut qs: Vec<_> = ms.clone();
        qs.sort_by(|a, b| b.quality.total_cmp(&a.quality));
        for (patch, mm) in p.iter().zip(&qs) {
            assert_eq!(*patch, centered_patch(&img, mm.x, mm.y, 96));
        }
        assert_eq!(extract_minutiae_patches(&img, &[], 96, 5), Err(PatchError::EmptyPatchSet));
    }

    #[test]
    fn fusion_rules() {
        let f = FusionConfig::default();
        assert_eq!(f.fuse(1.0, 0.0), 0.8);
        assert_eq!(f.fuse_patches(&[], 0.37), 0.37);
        for s in [0.0, 0.1, 0.3, 0.7, 0.9999] {
            assert_eq!(f.fuse(s, s), s);
        }
        assert!(FusionConfig::new(0.5, 0.6).is_err());
    }
}
