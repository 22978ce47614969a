use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DeformationBasis, WarpError};

pub const MAX_ROTATION_DEG: f64 = 30.0;
pub const MAX_TRANSLATION_PX: f64 = 25.0;
pub const DEFAULT_SIGMA_C: f64 = 0.66;
/// Number of leading eigen-directions that receive a random coefficient.
pub const ACTIVE_COEFFICIENTS: usize = 2;

/// Rigid pose of an impression: rotation in degrees (counter-clockwise as
/// displayed) and translation in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Pose {
    pub const IDENTITY: Pose = Pose { rotation: 0.0, tx: 0.0, ty: 0.0 };

    pub fn new(rotation: f64, tx: f64, ty: f64) -> Result<Self, WarpError> {
        let pose = Self { rotation, tx, ty };
        pose.validate()?;
        Ok(pose)
    }

    /// Skips the range check; used for test transforms such as 90-degree turns.
    pub fn unchecked(rotation: f64, tx: f64, ty: f64) -> Self {
        Self { rotation, tx, ty }
    }

    pub fn validate(&self) -> Result<(), WarpError> {
        let ok = self.rotation.abs() <= MAX_ROTATION_DEG
            && self.tx.abs() <= MAX_TRANSLATION_PX
            && self.ty.abs() <= MAX_TRANSLATION_PX;
        if ok {
            Ok(())
        } else {
            Err(WarpError::PoseOutOfRange(*self))
        }
    }
}

/// Source of the two draw kinds pose sampling needs.
pub trait PoseRng {
    /// Uniform on `[lo, hi)`.
    fn uniform(&mut self, lo: f64, hi: f64) -> f64;
    fn normal(&mut self, mean: f64, std: f64) -> f64;
}

impl<R: Rng + ?Sized> PoseRng for R {
    fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.random::<f64>()
    }

    fn normal(&mut self, mean: f64, std: f64) -> f64 {
        let z: f64 = StandardNormal.sample(self);
        mean + std * z
    }
}

/// Draws a uniform pose and coefficients for the basis: the two leading
/// coefficients are `N(0, sigma_c^2)`, the rest zero.
pub fn sample_pose_and_coeffs<R: PoseRng + ?Sized>(
    rng: &mut R,
    basis: &DeformationBasis,
    sigma_c: f64,
) -> (Pose, Vec<f64>) {
    let rotation = rng.uniform(-MAX_ROTATION_DEG, MAX_ROTATION_DEG);
    let tx = rng.uniform(-MAX_TRANSLATION_PX, MAX_TRANSLATION_PX);
    let ty = rng.uniform(-MAX_TRANSLATION_PX, MAX_TRANSLATION_PX);
    let mut coeffs = vec![0.0; basis.t()];
    for c in coeffs.iter_mut().take(ACTIVE_COEFFICIENTS) {
        *c = rng.normal(0.0, sigma_c);
    }
    (Pose { rotation, tx, ty }, coeffs)
}
