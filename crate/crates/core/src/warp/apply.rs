use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{DistortionSample, Pose, WarpError};
use crate::image::{sample_bilinear, GrayImage};

/// Value written where the inverse map leaves the source image (no contact).
pub const BACKGROUND: f32 = 1.0;

/// Order in which the rigid pose and the non-linear field are applied.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarpOrder {
    /// Rotate about the center, translate, then displace.
    #[default]
    RigidThenDeform,
    /// Displace first, then rotate and translate.
    DeformThenRigid,
}

pub fn apply_warp(image: &GrayImage, pose: &Pose, distortion: &DistortionSample) -> Result<GrayImage, WarpError> {
    apply_warp_ordered(image, pose, distortion, WarpOrder::default())
}

/// Backward-maps every output pixel to the source and samples bilinearly.
///
/// The displacement field gives, at each output pixel, the offset the content
/// travelled; the source position is found by undoing the stages in reverse.
pub fn apply_warp_ordered(
    image: &GrayImage,
    pose: &Pose,
    distortion: &DistortionSample,
    order: WarpOrder,
) -> Result<GrayImage, WarpError> {
    let (h, w) = image.dim();
    if distortion.field.dim() != (h, w) {
        return Err(WarpError::ShapeMismatch { image: (h, w), field: distortion.field.dim() });
    }
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let theta = pose.rotation.to_radians();
    let (sin, cos) = theta.sin_cos();
    let unrotate = |x: f64, y: f64| -> (f64, f64) {
        let (rx, ry) = (x - cx, y - cy);
        (cx + rx * cos - ry * sin, cy + rx * sin + ry * cos)
    };
    let field = &distortion.field;
    let mut out = Array2::from_elem((h, w), BACKGROUND);
    for ((y, x), v) in out.indexed_iter_mut() {
        let (qx, qy) = (x as f64, y as f64);
        let (sx, sy) = match order {
            WarpOrder::RigidThenDeform => {
                let ux = qx - field.dx[[y, x]];
                let uy = qy - field.dy[[y, x]];
                unrotate(ux - pose.tx, uy - pose.ty)
            }
            WarpOrder::DeformThenRigid => {
                let (ux, uy) = unrotate(qx - pose.tx, qy - pose.ty);
                let (dx, dy) = field.sample(ux, uy);
                (ux - dx, uy - dy)
            }
        };
        if let Some(s) = sample_bilinear(image, snap(sx), snap(sy)) {
            *v = s.clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Removes floating-point residue from exact grid hits (e.g. `cos(pi/2)`).
#[inline]
fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}
