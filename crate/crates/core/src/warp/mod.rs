//! Multiple-impression synthesis: rigid pose, statistical deformation fields,
//! and backward warping.

mod apply;
mod basis;
mod field;
mod pose;
pub mod tps;

pub use apply::{apply_warp, apply_warp_ordered, WarpOrder, BACKGROUND};
pub use basis::{
    compose_distortion_field, synthesize_basis, synthesize_basis_with, DeformationBasis, DistortionSample,
    SynthBasisConfig, ORTHONORMAL_TOL,
};
pub use field::VectorField;
pub use pose::{
    sample_pose_and_coeffs, Pose, PoseRng, ACTIVE_COEFFICIENTS, DEFAULT_SIGMA_C, MAX_ROTATION_DEG,
    MAX_TRANSLATION_PX,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum WarpError {
    #[error("basis error: {0}")]
    Basis(String),
    #[error("pose {0:?} outside rotation +-30 deg / translation +-25 px")]
    PoseOutOfRange(Pose),
    #[error("image is {image:?} but distortion field is {field:?}")]
    ShapeMismatch { image: (usize, usize), field: (usize, usize) },
    #[error("{0}")]
    Io(String),
}
