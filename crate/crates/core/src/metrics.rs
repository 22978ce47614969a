//! Threshold metrics over labeled score sets: TAR at FAR for verification
//! scores and TDR at FDR for spoof-detection scores.
//!
//! Both share one rule. For a negative list `neg` and a target rate `r`, the
//! operating threshold is the smallest candidate `tau` with
//! `#{neg >= tau} / |neg| <= r`, where candidates are every observed score
//! plus the successor of the largest one (which rejects everything). The
//! positive rate is `#{pos >= tau} / |pos|`.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("{0} score list is empty")]
    Empty(&'static str),
    #[error("non-finite score in {0} list")]
    NonFinite(&'static str),
    #[error("target rate {0} is outside [0, 1]")]
    BadTarget(f64),
}

/// Genuine/imposter similarity scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    genuine: Vec<f64>,
    imposter: Vec<f64>,
}

impl ScoreSet {
    pub fn new(genuine: Vec<f64>, imposter: Vec<f64>) -> Result<Self, MetricError> {
        check_finite(&genuine, "genuine")?;
        check_finite(&imposter, "imposter")?;
        Ok(Self { genuine, imposter })
    }

    pub fn genuine(&self) -> &[f64] {
        &self.genuine
    }

    pub fn imposter(&self) -> &[f64] {
        &self.imposter
    }
}

/// Detector outputs; higher means more spoof-like.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionScoreSet {
    pub live_scores: Vec<f64>,
    pub spoof_scores: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub target: f64,
    pub threshold: f64,
    /// Positive-class acceptance (TAR or TDR).
    pub rate: f64,
}

fn check_finite(v: &[f64], name: &'static str) -> Result<(), MetricError> {
    if v.iter().all(|s| s.is_finite()) {
        Ok(())
    } else {
        Err(MetricError::NonFinite(name))
    }
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Fraction of a sorted list at or above `tau`.
fn frac_at_or_above(sorted: &[f64], tau: f64) -> f64 {
    let below = sorted.partition_point(|&s| s < tau);
    (sorted.len() - below) as f64 / sorted.len() as f64
}

fn operating_point(
    pos: &[f64],
    neg: &[f64],
    target: f64,
    pos_name: &'static str,
    neg_name: &'static str,
) -> Result<OperatingPoint, MetricError> {
    if pos.is_empty() {
        return Err(MetricError::Empty(pos_name));
    }
    if neg.is_empty() {
        return Err(MetricError::Empty(neg_name));
    }
    check_finite(pos, pos_name)?;
    check_finite(neg, neg_name)?;
    if !(0.0..=1.0).contains(&target) {
        return Err(MetricError::BadTarget(target));
    }
    let pos = sorted(pos);
    let neg = sorted(neg);
    let mut cands: Vec<f64> = pos.iter().chain(neg.iter()).copied().collect();
    cands.sort_by(f64::total_cmp);
    cands.dedup();
    let top = *cands.last().expect("non-empty");
    cands.push(top.next_up());
    // the negative rate is non-increasing in tau, so the first passing candidate is found by bisection
    let idx = cands.partition_point(|&tau| frac_at_or_above(&neg, tau) > target);
    let threshold = cands[idx];
    Ok(OperatingPoint { target, threshold, rate: frac_at_or_above(&pos, threshold) })
}

/// One operating point per FAR target, in the given order.
pub fn tar_at_far(scores: &ScoreSet, far_targets: &[f64]) -> Result<Vec<OperatingPoint>, MetricError> {
    far_targets
        .iter()
        .map(|&t| operating_point(&scores.genuine, &scores.imposter, t, "genuine", "imposter"))
        .collect()
}

/// Returns `(threshold, TDR)` with live scores as the negatives.
pub fn tdr_at_fdr(scores: &DetectionScoreSet, fdr_target: f64) -> Result<(f64, f64), MetricError> {
    let p = operating_point(&scores.spoof_scores, &scores.live_scores, fdr_target, "spoof", "live")?;
    Ok((p.threshold, p.rate))
}

/// The operating point used in the experiments: FDR = 0.2 %.
pub const DEFAULT_FDR: f64 = 0.002;
