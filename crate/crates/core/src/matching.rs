//! Fixed-length embeddings, cosine match scores, genuine/imposter pairing and
//! the cross-set identity-leakage audit.

use std::collections::HashSet;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binarize::classical_binarize;
use crate::dataset::{DataError, Dataset, ImpressionRecord};
use crate::image::{resize_bilinear, GrayImage};
use crate::material::MaterialLabel;
use crate::metrics::{MetricError, ScoreSet};
use crate::seed::rng_from;

pub const EMBEDDING_DIM: usize = 192;
/// Above this many imposter pairs, a uniform sample of this size is scored.
pub const DEFAULT_IMPOSTER_CAP: usize = 1_000_000;

/// Unit-norm identity vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding(Vec<f32>);

impl Embedding {
    /// Normalizes `v`; an all-zero input maps to the first basis vector.
    pub fn from_raw(mut v: Vec<f32>) -> Self {
        let n = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
        if n > 0.0 && n.is_finite() {
            v.iter_mut().for_each(|x| *x = (*x as f64 / n) as f32);
        } else {
            v.iter_mut().for_each(|x| *x = 0.0);
            if let Some(first) = v.first_mut() {
                *first = 1.0;
            }
        }
        Self(v)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
    }
}

pub trait Embedder: Sync {
    fn embed(&self, image: &GrayImage) -> Embedding;
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MatchError {
    #[error("embedding lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

/// Cosine similarity clamped to `[-1, 1]`.
pub fn match_score(a: &Embedding, b: &Embedding) -> Result<f64, MatchError> {
    if a.len() != b.len() {
        return Err(MatchError::LengthMismatch(a.len(), b.len()));
    }
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.0.iter().zip(&b.0) {
        let (x, y) = (x as f64, y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    let denom = (aa * bb).sqrt();
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((ab / denom).clamp(-1.0, 1.0))
}

/// Training-free embedder: classical ridge map, resized to `side x side`,
/// centered, then a seeded Gaussian projection to `dim` values.
#[derive(Debug, Clone)]
pub struct ProjectionEmbedder {
    side: usize,
    dim: usize,
    matrix: Vec<f32>,
}

impl ProjectionEmbedder {
    pub fn new(seed: u64) -> Self {
        Self::with_shape(seed, 48, EMBEDDING_DIM)
    }

    pub fn with_shape(seed: u64, side: usize, dim: usize) -> Self {
        let mut rng = rng_from(seed);
        let scale = 1.0 / ((side * side) as f64).sqrt();
        let matrix = (0..dim * side * side)
            .map(|_| (rng.sample::<f64, _>(StandardNormal) * scale) as f32)
            .collect();
        Self { side, dim, matrix }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

impl Embedder for ProjectionEmbedder {
    fn embed(&self, image: &GrayImage) -> Embedding {
        let ridges = classical_binarize(image);
        let small = resize_bilinear(&ridges, self.side, self.side);
        let n = (self.side * self.side) as f32;
        let mean = small.iter().sum::<f32>() / n;
        let x: Vec<f32> = small.iter().map(|v| v - mean).collect();
        let out = self
            .matrix
            .chunks_exact(x.len())
            .map(|row| row.iter().zip(&x).map(|(a, b)| a * b).sum())
            .collect();
        Embedding::from_raw(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "material")]
pub enum Pairing {
    LiveLive,
    /// Live records against spoofs, optionally of one material only.
    LiveSpoof(Option<MaterialLabel>),
}

impl Pairing {
    pub fn name(&self) -> String {
        match self {
            Pairing::LiveLive => "live-live".into(),
            Pairing::LiveSpoof(None) => "live-spoof".into(),
            Pairing::LiveSpoof(Some(m)) => format!("live-{m}"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PairingError {
    #[error("pairing {pairing}: {reason}")]
    Insufficient { pairing: String, reason: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// Index pairs into `Dataset::records()`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PairList {
    pub genuine: Vec<(usize, usize)>,
    pub imposter: Vec<(usize, usize)>,
    /// Imposter pairs that exist before any sampling.
    pub imposter_available: usize,
}

/// Enumerates genuine pairs in full and imposter pairs up to `cap`
/// (uniformly sampled without replacement above it, seeded).
pub fn enumerate_pairs(
    records: &[ImpressionRecord],
    pairing: &Pairing,
    cap: usize,
    seed: u64,
) -> PairList {
    let mut out = PairList::default();
    match pairing {
        Pairing::LiveLive => {
            let lives: Vec<usize> = (0..records.len()).filter(|&i| records[i].is_live).collect();
            let is_imp = |a: usize, b: usize| records[a].finger_id != records[b].finger_id;
            for (k, &a) in lives.iter().enumerate() {
                for &b in &lives[k + 1..] {
                    if !is_imp(a, b) {
                        out.genuine.push((a, b));
                    }
                }
            }
            let total = lives.len() * lives.len().saturating_sub(1) / 2 - out.genuine.len();
            out.imposter_available = total;
            out.imposter = if total <= cap {
                let mut v = Vec::with_capacity(total);
                for (k, &a) in lives.iter().enumerate() {
                    for &b in &lives[k + 1..] {
                        if is_imp(a, b) {
                            v.push((a, b));
                        }
                    }
                }
                v
            } else {
                sample_pairs(&lives, &lives, cap, seed, |a, b| a < b && is_imp(a, b))
            };
        }
        Pairing::LiveSpoof(material) => {
            let lives: Vec<usize> = (0..records.len()).filter(|&i| records[i].is_live).collect();
            let spoofs: Vec<usize> = (0..records.len())
                .filter(|&i| !records[i].is_live && material.as_ref().is_none_or(|m| &records[i].material == m))
                .collect();
            let is_imp = |a: usize, b: usize| records[a].finger_id != records[b].finger_id;
            for &a in &lives {
                for &b in &spoofs {
                    if !is_imp(a, b) {
                        out.genuine.push((a, b));
                    }
                }
            }
            let total = lives.len() * spoofs.len() - out.genuine.len();
            out.imposter_available = total;
            out.imposter = if total <= cap {
                let mut v = Vec::with_capacity(total);
                for &a in &lives {
                    for &b in &spoofs {
                        if is_imp(a, b) {
                            v.push((a, b));
                        }
                    }
                }
                v
            } else {
                sample_pairs(&lives, &spoofs, cap, seed, is_imp)
            };
        }
    }
    out
}

fn sample_pairs(
    left: &[usize],
    right: &[usize],
    cap: usize,
    seed: u64,
    accept: impl Fn(usize, usize) -> bool,
) -> Vec<(usize, usize)> {
    let mut rng = rng_from(seed);
    let mut seen = HashSet::with_capacity(cap);
    let mut out = Vec::with_capacity(cap);
    while out.len() < cap {
        let a = left[rng.random_range(0..left.len())];
        let b = right[rng.random_range(0..right.len())];
        if accept(a, b) && seen.insert((a, b)) {
            out.push((a, b));
        }
    }
    out.sort_unstable();
    out
}

/// Embeds every record once, in parallel, in record order.
pub fn embed_dataset(dataset: &Dataset, embedder: &dyn Embedder) -> Result<Vec<Embedding>, DataError> {
    dataset
        .records()
        .par_iter()
        .map(|r| dataset.load_image(r).map(|img| embedder.embed(&img)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreDistribution {
    pub pairing: String,
    pub scores: ScoreSet,
    pub pairs: PairList,
}

/// Genuine = same-finger pairs under the pairing rule; imposter = different fingers.
pub fn score_distributions(
    dataset: &Dataset,
    embedder: &dyn Embedder,
    pairing: &Pairing,
    imposter_cap: usize,
    seed: u64,
) -> Result<ScoreDistribution, PairingError> {
    let pairs = enumerate_pairs(dataset.records(), pairing, imposter_cap, seed);
    let insufficient = |reason: &str| PairingError::Insufficient { pairing: pairing.name(), reason: reason.into() };
    if pairs.genuine.is_empty() {
        return Err(insufficient("no same-finger pairs"));
    }
    let embs = embed_dataset(dataset, embedder)?;
    let score = |&(a, b): &(usize, usize)| match_score(&embs[a], &embs[b]).expect("embedder has a fixed length");
    let genuine = pairs.genuine.iter().map(score).collect();
    let imposter = pairs.imposter.iter().map(score).collect();
    Ok(ScoreDistribution { pairing: pairing.name(), scores: ScoreSet::new(genuine, imposter)?, pairs })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakPair {
    pub synthetic: String,
    pub training: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub pairs: Vec<LeakPair>,
    pub flagged_fingers: usize,
    pub max_score: f64,
    pub total_comparisons: u64,
    pub threshold: f64,
}

/// Scores every synthetic record against every training record.
pub fn leakage_check(
    synthetic: &Dataset,
    training: &Dataset,
    embedder: &dyn Embedder,
    threshold: f64,
) -> Result<LeakageReport, DataError> {
    let syn = embed_dataset(synthetic, embedder)?;
    let tr = embed_dataset(training, embedder)?;
    leakage_from_embeddings(synthetic.records(), &syn, training.records(), &tr, threshold)
}

pub fn leakage_from_embeddings(
    syn_records: &[ImpressionRecord],
    syn: &[Embedding],
    tr_records: &[ImpressionRecord],
    tr: &[Embedding],
    threshold: f64,
) -> Result<LeakageReport, DataError> {
    // rows are merged in synthetic-record order, so the report is deterministic
    let rows: Vec<(f64, Vec<LeakPair>)> = syn
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut max = f64::NEG_INFINITY;
            let mut hits = Vec::new();
            for (j, t) in tr.iter().enumerate() {
                let sc = match_score(s, t).expect("embedder has a fixed length");
                max = max.max(sc);
                if sc >= threshold {
                    hits.push(LeakPair {
                        synthetic: syn_records[i].key().to_string(),
                        training: tr_records[j].key().to_string(),
                        score: sc,
                    });
                }
            }
            (max, hits)
        })
        .collect();
    let mut flagged = HashSet::new();
    let mut pairs = Vec::new();
    let mut max_score = f64::NEG_INFINITY;
    for (i, (m, hits)) in rows.into_iter().enumerate() {
        max_score = max_score.max(m);
        if !hits.is_empty() {
            flagged.insert(syn_records[i].finger_id.clone());
        }
        pairs.extend(hits);
    }
    Ok(LeakageReport {
        pairs,
        flagged_fingers: flagged.len(),
        max_score: if max_score.is_finite() { max_score } else { 0.0 },
        total_comparisons: syn.len() as u64 * tr.len() as u64,
        threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Split;
    use std::path::PathBuf;

    fn rec(f: &str, i: u32, m: &str) -> ImpressionRecord {
        let material: MaterialLabel = m.parse().unwrap();
        ImpressionRecord {
            finger_id: f.into(),
            impression_id: i,
            is_live: material.is_live(),
            material,
            split: Split::Train,
            image_path: PathBuf::from(format!("{f}_{i}_{m}.png")),
            width: 8,
            height: 8,
            dpi: 500,
        }
    }

    #[test]
    fn self_antipodal_and_orthogonal_scores() {
        let a = Embedding::from_raw(vec![0.3, -1.2, 0.7, 2.0]);
        let neg = Embedding::from_raw(a.as_slice().iter().map(|x| -x).collect());
        assert_eq!(match_score(&a, &a).unwrap(), 1.0);
        assert_eq!(match_score(&a, &neg).unwrap(), -1.0);
        let e0 = Embedding::from_raw(vec![1.0, 0.0]);
        let e1 = Embedding::from_raw(vec![0.0, 1.0]);
        assert_eq!(match_score(&e0, &e1).unwrap(), 0.0);
        assert!(match_score(&e0, &a).is_err());
    }

    #[test]
    fn two_by_two_live_pairs() {
        let r = vec![rec("f1", 0, "live"), rec("f1", 1, "live"), rec("f2", 0, "live"), rec("f2", 1, "live")];
        let p = enumerate_pairs(&r, &Pairing::LiveLive, DEFAULT_IMPOSTER_CAP, 0);
        assert_eq!(p.genuine.len(), 2);
        assert_eq!(p.imposter.len(), 4);
    }

    #[test]
    fn one_live_one_spoof_is_one_genuine_pair() {
        let r = vec![rec("f1", 0, "live"), rec("f1", 0, "ecoflex")];
        let p = enumerate_pairs(&r, &Pairing::LiveSpoof(None), DEFAULT_IMPOSTER_CAP, 0);
        assert_eq!(p.genuine, vec![(0, 1)]);
        assert!(p.imposter.is_empty());
    }

    #[test]
    fn capped_imposters_are_distinct_and_valid() {
        let r: Vec<_> = (0..10).flat_map(|f| (0..3).map(move |i| rec(&format!("f{f}"), i, "live"))).collect();
        let p = enumerate_pairs(&r, &Pairing::LiveLive, 50, 9);
        assert_eq!(p.imposter.len(), 50);
        assert_eq!(p.imposter_available, 30 * 29 / 2 - 10 * 3);
        let set: HashSet<_> = p.imposter.iter().collect();
        assert_eq!(set.len(), 50);
        assert!(p.imposter.iter().all(|&(a, b)| a < b && r[a].finger_id != r[b].finger_id));
    }
}
