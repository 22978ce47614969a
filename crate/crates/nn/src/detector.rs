//! Two-branch spoof detector: one small CNN on the downscaled whole image,
//! one on 96x96 minutia-centered patches, fused as a weighted score.
//! Scores are oriented so that higher means more spoof-like.

use std::path::Path;

use candle_core::{Device, Result as CResult, Tensor};
use forge_core::binarize::ClassicalBinarizer;
use forge_core::dataset::{Dataset, Split};
use forge_core::image::{resize_bilinear, GrayImage};
use forge_core::minutiae::{image_stats, Minutia, StatsConfig};
use forge_core::pad::{extract_minutiae_patches, FusionConfig, PatchError, PATCH_SIZE};
use forge_core::seed::rng_from;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::layers::{bce_with_logits, images_to_tensor, lrelu, scalar, Conv, Linear};
use crate::optim::{Adam, AdamConfig};
use crate::params::{read_meta, CheckpointMeta, ParamStore, ParamsError};
use crate::TrainError;

pub const CHECKPOINT_KIND: &str = "spoof_detector";
/// Step count of the full-scale schedule; desk-scale runs default to 2,000.
pub const FULL_SCALE_STEPS: usize = 200_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Whole,
    Patch,
}

impl Branch {
    fn prefix(self) -> &'static str {
        match self {
            Branch::Whole => "whole.",
            Branch::Patch => "patch.",
        }
    }
}

impl std::str::FromStr for Branch {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "whole" => Ok(Branch::Whole),
            "patch" => Ok(Branch::Patch),
            _ => Err(format!("unknown branch {s:?} (expected whole or patch)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// Whole images are resized to this square edge.
    pub whole_input: usize,
    pub patch_size: usize,
    pub max_patches: usize,
    pub channels: Vec<usize>,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self { whole_input: 128, patch_size: PATCH_SIZE, max_patches: 20, channels: vec![8, 16, 32, 32] }
    }
}

struct BranchNet {
    convs: Vec<Conv>,
    head: Linear,
}

impl BranchNet {
    fn new(p: &mut ParamStore, prefix: &str, channels: &[usize]) -> CResult<Self> {
        let mut convs = Vec::new();
        let mut cin = 1;
        for (i, &c) in channels.iter().enumerate() {
            convs.push(Conv::new(p, &format!("{prefix}conv{i}"), cin, c, 3, 2)?);
            cin = c;
        }
        Ok(Self { convs, head: Linear::new(p, &format!("{prefix}head"), cin, 1, 1.0)? })
    }

    /// One logit per image, `(N,)`.
    fn logits(&self, x: &Tensor) -> CResult<Tensor> {
        let mut h = ((x * 2.0)? - 1.0)?;
        for c in &self.convs {
            h = lrelu(&c.forward(&h)?)?;
        }
        self.head.forward(&h.mean((2, 3))?)?.squeeze(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DetectorState {
    config: DetectorConfig,
    whole_trained: bool,
    patch_trained: bool,
}

pub struct SpoofDetector {
    pub config: DetectorConfig,
    store: ParamStore,
    whole: BranchNet,
    patch: BranchNet,
    whole_trained: bool,
    patch_trained: bool,
}

impl SpoofDetector {
    pub fn new(config: DetectorConfig, seed: u64) -> Result<Self, ParamsError> {
        if config.patch_size != PATCH_SIZE || config.channels.is_empty() || config.whole_input == 0 || config.max_patches == 0 {
            return Err(ParamsError::Checkpoint { path: "<config>".into(), message: format!("invalid detector config {config:?}") });
        }
        let mut store = ParamStore::new(seed);
        let whole = BranchNet::new(&mut store, Branch::Whole.prefix(), &config.channels)?;
        let patch = BranchNet::new(&mut store, Branch::Patch.prefix(), &config.channels)?;
        Ok(Self { config, store, whole, patch, whole_trained: false, patch_trained: false })
    }

    pub fn load(path: &Path) -> Result<Self, ParamsError> {
        let meta = read_meta(path)?;
        meta.expect_kind(CHECKPOINT_KIND)?;
        let state: DetectorState = meta.config_as()?;
        let mut d = Self::new(state.config, 0)?;
        d.store.load(path)?;
        d.whole_trained = state.whole_trained;
        d.patch_trained = state.patch_trained;
        Ok(d)
    }

    pub fn save(&self, path: &Path) -> Result<(), ParamsError> {
        let state = DetectorState { config: self.config.clone(), whole_trained: self.whole_trained, patch_trained: self.patch_trained };
        let mut meta = CheckpointMeta::new(CHECKPOINT_KIND, &state, 0);
        meta.id = self.digest()?;
        self.store.save(path, &meta)
    }

    pub fn digest(&self) -> CResult<String> {
        self.store.digest()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn is_trained(&self, branch: Branch) -> bool {
        match branch {
            Branch::Whole => self.whole_trained,
            Branch::Patch => self.patch_trained,
        }
    }

    fn net(&self, branch: Branch) -> &BranchNet {
        match branch {
            Branch::Whole => &self.whole,
            Branch::Patch => &self.patch,
        }
    }

    fn whole_input(&self, image: &GrayImage) -> GrayImage {
        let s = self.config.whole_input;
        if image.dim() == (s, s) {
            image.clone()
        } else {
            resize_bilinear(image, s, s)
        }
    }

    /// Spoof probabilities for prepared branch inputs (whole images already resized).
    pub fn branch_scores(&self, branch: Branch, inputs: &[GrayImage]) -> CResult<Vec<f64>> {
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(32) {
            let x = images_to_tensor(&chunk.iter().collect::<Vec<_>>(), self.device())?;
            let p = candle_nn::ops::sigmoid(&self.net(branch).logits(&x)?)?;
            out.extend(p.to_vec1::<f32>()?.into_iter().map(f64::from));
        }
        Ok(out)
    }

    pub fn whole_score(&self, image: &GrayImage) -> Result<f64, ParamsError> {
        if !self.whole_trained {
            return Err(ParamsError::Untrained("whole-image branch".into()));
        }
        Ok(self.branch_scores(Branch::Whole, &[self.whole_input(image)])?[0])
    }

    /// Mean patch score, or `None` when there are no minutiae to center patches on.
    pub fn patch_score(&self, image: &GrayImage, minutiae: &[Minutia]) -> Result<Option<f64>, ParamsError> {
        if !self.patch_trained {
            return Err(ParamsError::Untrained("patch branch".into()));
        }
        match extract_minutiae_patches(image, minutiae, self.config.patch_size, self.config.max_patches) {
            Ok(patches) => {
                let s = self.branch_scores(Branch::Patch, &patches)?;
                Ok(Some(s.iter().sum::<f64>() / s.len() as f64))
            }
            Err(PatchError::EmptyPatchSet) => Ok(None),
            Err(e) => Err(ParamsError::Checkpoint { path: "<input>".into(), message: e.to_string() }),
        }
    }

    /// Fused spoof score in `[0, 1]`; falls back to the whole-image score
    /// when no minutiae were found.
    pub fn spoof_score(&self, fusion: &FusionConfig, image: &GrayImage, minutiae: &[Minutia]) -> Result<f64, ParamsError> {
        let whole = self.whole_score(image)?;
        Ok(match self.patch_score(image, minutiae)? {
            Some(p) => fusion.fuse(p, whole),
            None => whole,
        })
    }
}

/// Minutiae from the classical binarizer, as used for patch extraction.
pub fn detect_minutiae(image: &GrayImage) -> Vec<Minutia> {
    image_stats(image, &ClassicalBinarizer::default(), &StatsConfig::default()).map(|(_, m)| m).unwrap_or_default()
}

/// One labelled training image with its minutiae.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorSample {
    pub image: GrayImage,
    pub spoof: bool,
    pub minutiae: Vec<Minutia>,
    pub validation: bool,
}

/// Loads every record; test-split records are the validation set, or a seeded
/// `validation_fraction` of records when the manifest has no test split.
pub fn detector_samples(dataset: &Dataset, validation_fraction: f64, seed: u64) -> Result<Vec<DetectorSample>, TrainError> {
    let has_test = dataset.records().iter().any(|r| r.split == Split::Test);
    let mut samples = dataset
        .records()
        .par_iter()
        .map(|r| {
            let image = dataset.load_image(r)?;
            let minutiae = detect_minutiae(&image);
            Ok(DetectorSample { image, spoof: !r.is_live, minutiae, validation: has_test && r.split == Split::Test })
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    if !has_test {
        hold_out(&mut samples, validation_fraction, seed);
    }
    Ok(samples)
}

/// Marks a seeded `fraction` of samples (rounded up, at least one when possible) as validation.
pub fn hold_out(samples: &mut [DetectorSample], fraction: f64, seed: u64) {
    let n = samples.len();
    let k = ((fraction.clamp(0.0, 1.0) * n as f64).ceil() as usize).min(n.saturating_sub(1));
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_from(seed));
    for (rank, &i) in idx.iter().enumerate() {
        samples[i].validation = rank < k;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub opt: AdamConfig,
    pub validation_fraction: f64,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 16,
            seed: 0,
            opt: AdamConfig { lr: 0.01, beta1: 0.9, beta2: 0.999, decay_every: 500, decay_gamma: 0.5 },
            validation_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorLog {
    pub branch: Branch,
    pub losses: Vec<(usize, f64)>,
    /// Fraction of validation inputs classified correctly at 0.5; `None` without validation data.
    pub validation_accuracy: Option<f64>,
    pub train_inputs: usize,
    pub validation_inputs: usize,
}

/// Trains one branch on the non-validation samples.
pub fn train_detector(
    detector: &mut SpoofDetector,
    samples: &[DetectorSample],
    branch: Branch,
    cfg: &DetectorTrainConfig,
) -> Result<DetectorLog, TrainError> {
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for s in samples {
        let inputs: Vec<GrayImage> = match branch {
            Branch::Whole => vec![detector.whole_input(&s.image)],
            Branch::Patch => extract_minutiae_patches(&s.image, &s.minutiae, detector.config.patch_size, detector.config.max_patches)
                .unwrap_or_default(),
        };
        let dst = if s.validation { &mut val } else { &mut train };
        dst.extend(inputs.into_iter().map(|x| (x, s.spoof)));
    }
    let spoofs = train.iter().filter(|(_, y)| *y).count();
    if spoofs == 0 || spoofs == train.len() {
        return Err(TrainError::Config(format!(
            "{branch:?} branch needs both live and spoof training inputs ({} spoof of {})",
            spoofs,
            train.len()
        )));
    }
    if cfg.batch == 0 {
        return Err(TrainError::Config("batch must be positive".into()));
    }
    let dev = detector.device().clone();
    let mut opt = Adam::new(detector.store.vars_with_prefix(branch.prefix()), cfg.opt)?;
    let mut rng = rng_from(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let picks: Vec<&(GrayImage, bool)> = (0..cfg.batch).map(|_| &train[rng.random_range(0..train.len())]).collect();
        let x = images_to_tensor(&picks.iter().map(|(g, _)| g).collect::<Vec<_>>(), &dev)?;
        let y = Tensor::from_vec(picks.iter().map(|(_, s)| *s as u8 as f32).collect::<Vec<_>>(), cfg.batch, &dev)?;
        let loss = bce_with_logits(&detector.net(branch).logits(&x)?, &y)?;
        opt.step(&loss, step)?;
        let l = scalar(&loss)?;
        if !l.is_finite() {
            return Err(TrainError::Diverged(format!("detector loss is {l} at step {step}")));
        }
        losses.push((step, l));
    }
    match branch {
        Branch::Whole => detector.whole_trained = true,
        Branch::Patch => detector.patch_trained = true,
    }
    let validation_accuracy = if val.is_empty() {
        None
    } else {
        let inputs: Vec<GrayImage> = val.iter().map(|(g, _)| g.clone()).collect();
        let scores = detector.branch_scores(branch, &inputs)?;
        let hits = scores.iter().zip(&val).filter(|(s, (_, y))| (**s >= 0.5) == *y).count();
        Some(hits as f64 / val.len() as f64)
    };
    Ok(DetectorLog { branch, losses, validation_accuracy, train_inputs: train.len(), validation_inputs: val.len() })
}
