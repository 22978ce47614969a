use std::f64::consts::PI;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::thinning::{neighbor_values, zhang_suen, NEIGHBORS};
use crate::image::GrayImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MinutiaKind {
    Ending,
    Bifurcation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Minutia {
    pub x: usize,
    pub y: usize,
    /// Radians in image coordinates (y down), `[0, 2*pi)`.
    pub theta: f64,
    pub kind: MinutiaKind,
    /// Local orientation coherence scaled to `[0, 100]`.
    pub quality: f64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ExtractionError {
    #[error("input is not binary: pixel ({x}, {y}) = {value}")]
    NonBinary { x: usize, y: usize, value: f32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtractConfig {
    /// Minutiae closer than this to the image border are dropped.
    pub border_margin: usize,
    /// Branches shorter than this (pixels) ending in a junction or a free end are pruned.
    pub min_branch: usize,
    /// Pixels traced from an ending to estimate its direction.
    pub direction_steps: usize,
    /// Half-size of the structure-tensor window used for quality.
    pub quality_radius: usize,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self { border_margin: 10, min_branch: 5, direction_steps: 6, quality_radius: 8 }
    }
}

/// `CN(p) = 1/2 * sum_i |n_i - n_{i+1}|` over the cyclic 8-neighborhood.
#[inline]
pub fn crossing_number(skeleton: &Array2<bool>, y: usize, x: usize) -> u32 {
    let p = neighbor_values(skeleton, y, x);
    let mut s = 0;
    for i in 0..8 {
        s += (p[i] != p[(i + 1) % 8]) as u32;
    }
    s / 2
}

pub fn extract_minutiae(binary: &GrayImage) -> Result<Vec<Minutia>, ExtractionError> {
    extract_minutiae_with(binary, &ExtractConfig::default(), None).map(|(m, _)| m)
}

/// Thins, prunes spurs, and classifies skeleton pixels by crossing number.
///
/// `mask`, when given, additionally drops minutiae within `border_margin`
/// pixels of the mask background. Returns the minutiae and the pruned skeleton.
pub fn extract_minutiae_with(
    binary: &GrayImage,
    cfg: &ExtractConfig,
    mask: Option<&Array2<bool>>,
) -> Result<(Vec<Minutia>, Array2<bool>), ExtractionError> {
    for ((y, x), &v) in binary.indexed_iter() {
        if v != 0.0 && v != 1.0 {
            return Err(ExtractionError::NonBinary { x, y, value: v });
        }
    }
    let ridges = binary.mapv(|v| v == 1.0);
    let mut skeleton = zhang_suen(&ridges);
    prune_short_branches(&mut skeleton, cfg.min_branch);
    let allowed = mask.map(|m| erode(m, cfg.border_margin));

    let (h, w) = skeleton.dim();
    let m = cfg.border_margin;
    let mut out = Vec::new();
    if h <= 2 * m || w <= 2 * m {
        return Ok((out, skeleton));
    }
    for y in m..h - m {
        for x in m..w - m {
            if !skeleton[[y, x]] {
                continue;
            }
            if let Some(a) = &allowed {
                if !a[[y, x]] {
                    continue;
                }
            }
            let kind = match crossing_number(&skeleton, y, x) {
                1 => MinutiaKind::Ending,
                3 => MinutiaKind::Bifurcation,
                _ => continue,
            };
            let theta = match kind {
                MinutiaKind::Ending => ending_direction(&skeleton, y, x, cfg.direction_steps)
                    .unwrap_or_else(|| orientation(binary, y, x, cfg.quality_radius).0),
                MinutiaKind::Bifurcation => orientation(binary, y, x, cfg.quality_radius).0,
            };
            let quality = orientation(binary, y, x, cfg.quality_radius).1 * 100.0;
            out.push(Minutia { x, y, theta, kind, quality });
        }
    }
    Ok((out, skeleton))
}

fn erode(mask: &Array2<bool>, r: usize) -> Array2<bool> {
    let (h, w) = mask.dim();
    // distance to nearest background via a separable chessboard erosion
    let mut rows = Array2::from_elem((h, w), false);
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            rows[[y, x]] = (lo..=hi).all(|xx| mask[[y, xx]]);
        }
    }
    Array2::from_shape_fn((h, w), |(y, x)| {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(h - 1);
        (lo..=hi).all(|yy| rows[[yy, x]])
    })
}

fn skeleton_neighbors(sk: &Array2<bool>, y: usize, x: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
    let (h, w) = sk.dim();
    // 4-neighbors first so tracing follows the straightest continuation
    const ORDER: [usize; 8] = [0, 2, 4, 6, 1, 3, 5, 7];
    ORDER.iter().filter_map(move |&i| {
        let (dy, dx) = NEIGHBORS[i];
        let yy = y as isize + dy;
        let xx = x as isize + dx;
        (yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w && sk[[yy as usize, xx as usize]])
            .then_some((yy as usize, xx as usize))
    })
}

enum TraceEnd {
    Junction,
    FreeEnd,
    TooLong,
}

/// Follows the skeleton from an ending for at most `limit` pixels.
fn trace(sk: &Array2<bool>, start: (usize, usize), limit: usize) -> (Vec<(usize, usize)>, TraceEnd) {
    let mut path = vec![start];
    let mut cur = start;
    loop {
        if path.len() > limit {
            return (path, TraceEnd::TooLong);
        }
        let next = skeleton_neighbors(sk, cur.0, cur.1).find(|p| !path.contains(p));
        let Some(next) = next else {
            return (path, TraceEnd::FreeEnd);
        };
        if crossing_number(sk, next.0, next.1) >= 3 {
            return (path, TraceEnd::Junction);
        }
        path.push(next);
        cur = next;
    }
}

/// Removes spurs (ending-to-junction branches) and isolated fragments
/// shorter than `min_len` pixels.
fn prune_short_branches(sk: &mut Array2<bool>, min_len: usize) {
    if min_len == 0 {
        return;
    }
    for _ in 0..3 {
        let (h, w) = sk.dim();
        let mut removals = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if !sk[[y, x]] {
                    continue;
                }
                let isolated = skeleton_neighbors(sk, y, x).next().is_none();
                if isolated {
                    removals.push(vec![(y, x)]);
                    continue;
                }
                if crossing_number(sk, y, x) != 1 {
                    continue;
                }
                let (path, end) = trace(sk, (y, x), min_len);
                match end {
                    TraceEnd::Junction | TraceEnd::FreeEnd if path.len() < min_len => removals.push(path),
                    _ => {}
                }
            }
        }
        if removals.is_empty() {
            break;
        }
        for path in removals {
            for (y, x) in path {
                sk[[y, x]] = false;
            }
        }
    }
}

fn ending_direction(sk: &Array2<bool>, y: usize, x: usize, steps: usize) -> Option<f64> {
    let (path, _) = trace(sk, (y, x), steps);
    let &(ty, tx) = path.last()?;
    if (ty, tx) == (y, x) {
        return None;
    }
    let theta = (y as f64 - ty as f64).atan2(x as f64 - tx as f64);
    Some(theta.rem_euclid(2.0 * PI))
}

/// Ridge orientation in `[0, pi)` and coherence in `[0, 1]` from the
/// structure tensor of central-difference gradients in a square window.
fn orientation(img: &GrayImage, y: usize, x: usize, r: usize) -> (f64, f64) {
    let (h, w) = img.dim();
    let (mut gxx, mut gyy, mut gxy) = (0.0f64, 0.0f64, 0.0f64);
    for yy in y.saturating_sub(r).max(1)..(y + r + 1).min(h - 1) {
        for xx in x.saturating_sub(r).max(1)..(x + r + 1).min(w - 1) {
            let gx = (img[[yy, xx + 1]] - img[[yy, xx - 1]]) as f64 * 0.5;
            let gy = (img[[yy + 1, xx]] - img[[yy - 1, xx]]) as f64 * 0.5;
            gxx += gx * gx;
            gyy += gy * gy;
            gxy += gx * gy;
        }
    }
    let denom = gxx + gyy;
    if denom <= 0.0 {
        return (0.0, 0.0);
    }
    let coherence = ((gxx - gyy).powi(2) + 4.0 * gxy * gxy).sqrt() / denom;
    // gradient direction is normal to the ridge
    let grad_angle = 0.5 * (2.0 * gxy).atan2(gxx - gyy);
    let ridge = (grad_angle + PI / 2.0).rem_euclid(PI);
    (ridge, coherence.clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn canvas(h: usize, w: usize) -> GrayImage {
        Array2::zeros((h, w))
    }

    #[test]
    fn straight_segment_has_two_endings() {
        let mut img = canvas(40, 60);
        for x in 15..45 {
            img[[20, x]] = 1.0;
        }
        let m = extract_minutiae(&img).unwrap();
        assert_eq!(m.iter().filter(|m| m.kind == MinutiaKind::Ending).count(), 2);
        assert_eq!(m.iter().filter(|m| m.kind == MinutiaKind::Bifurcation).count(), 0);
        let left = m.iter().find(|m| m.x == 15).unwrap();
        assert!((left.theta - PI).abs() < 1e-9, "left ending points west: {}", left.theta);
    }

    #[test]
    fn t_junction_has_one_bifurcation_at_the_junction() {
        let mut img = canvas(50, 50);
        for x in 12..38 {
            img[[15, x]] = 1.0;
        }
        for y in 15..38 {
            img[[y, 25]] = 1.0;
        }
        let m = extract_minutiae(&img).unwrap();
        let bif: Vec<_> = m.iter().filter(|m| m.kind == MinutiaKind::Bifurcation).collect();
        assert_eq!(bif.len(), 1);
        assert_eq!((bif[0].x, bif[0].y), (25, 15));
        assert_eq!(m.iter().filter(|m| m.kind == MinutiaKind::Ending).count(), 3);
    }

    #[test]
    fn short_spur_is_pruned() {
        let mut img = canvas(50, 60);
        for x in 12..48 {
            img[[25, x]] = 1.0;
        }
        for y in 22..25 {
            img[[y, 30]] = 1.0;
        }
        let m = extract_minutiae(&img).unwrap();
        assert!(m.iter().all(|m| m.kind == MinutiaKind::Ending));
        assert_eq!(m.len(), 2);
    }

    #[test]
    fn border_margin_excludes_edge_minutiae() {
        let mut img = canvas(40, 40);
        for x in 0..40 {
            img[[20, x]] = 1.0;
        }
        assert!(extract_minutiae(&img).unwrap().is_empty());
    }

    #[test]
    fn non_binary_input_is_rejected() {
        let mut img = canvas(30, 30);
        img[[3, 4]] = 0.5;
        assert_eq!(extract_minutiae(&img), Err(ExtractionError::NonBinary { x: 4, y: 3, value: 0.5 }));
    }

    fn parallel_ridges(break_at: Option<usize>) -> GrayImage {
        Array2::from_shape_fn((80, 80), |(y, x)| {
            let on = (8..72).contains(&y) && y % 8 < 3;
            let gap = break_at.is_some_and(|r| y / 8 == r && (38..43).contains(&x));
            if on && !gap { 1.0 } else { 0.0 }
        })
    }

    #[test]
    fn ridge_break_adds_two_endings() {
        let base = extract_minutiae(&parallel_ridges(None)).unwrap();
        let broken = extract_minutiae(&parallel_ridges(Some(4))).unwrap();
        let endings = |m: &[Minutia]| m.iter().filter(|m| m.kind == MinutiaKind::Ending).count();
        assert_eq!(endings(&broken), endings(&base) + 2);
        assert_eq!(broken.len(), base.len() + 2);
        let new: Vec<_> = broken.iter().filter(|m| m.y / 8 == 4).collect();
        assert!(new.iter().all(|m| m.quality > 80.0), "{new:?}");
    }
}
