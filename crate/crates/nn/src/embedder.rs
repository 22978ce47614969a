//! Learned fixed-length identity embedding: a strided CNN pooled to a 4x4
//! grid, projected to 192 values and L2-normalized. Trained with a
//! margin-based contrastive loss on multi-impression data.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{Device, Result as CResult, Tensor, D};
use forge_core::dataset::Dataset;
use forge_core::image::{resize_bilinear, GrayImage};
use forge_core::matching::{Embedder, Embedding, EMBEDDING_DIM};
use forge_core::seed::rng_from;
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::layers::{images_to_tensor, lrelu, scalar, up2, Conv, Linear};
use crate::optim::{Adam, AdamConfig};
use crate::params::{CheckpointMeta, ParamStore, ParamsError};
use crate::TrainError;

pub const CHECKPOINT_KIND: &str = "embedder";
const GRID: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderConfig {
    /// Images are resized to this square edge before embedding.
    pub input_size: usize,
    pub channels: Vec<usize>,
    pub dim: usize,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self { input_size: 256, channels: vec![8, 16, 32, 32, 64], dim: EMBEDDING_DIM }
    }
}

impl EmbedderConfig {
    /// Tensor inputs must have sides divisible by this.
    pub fn granularity(&self) -> usize {
        GRID << self.channels.len()
    }
}

pub struct LearnedEmbedder {
    pub config: EmbedderConfig,
    store: ParamStore,
    convs: Vec<Conv>,
    head: Linear,
    pub step: u64,
}

impl LearnedEmbedder {
    pub fn new(config: EmbedderConfig, seed: u64) -> Result<Self, ParamsError> {
        if config.channels.is_empty() || config.dim == 0 || config.input_size % config.granularity() != 0 {
            return Err(ParamsError::Checkpoint { path: "<config>".into(), message: format!("invalid embedder config {config:?}") });
        }
        let mut store = ParamStore::new(seed);
        let mut convs = Vec::new();
        let mut cin = 1;
        for (i, &c) in config.channels.iter().enumerate() {
            convs.push(Conv::new(&mut store, &format!("emb.conv{i}"), cin, c, 3, 2)?);
            cin = c;
        }
        let head = Linear::new(&mut store, "emb.head", cin * GRID * GRID, config.dim, 1.0)?;
        Ok(Self { config, store, convs, head, step: 0 })
    }

    pub fn load(path: &Path) -> Result<Self, ParamsError> {
        let meta = crate::params::read_meta(path)?;
        meta.expect_kind(CHECKPOINT_KIND)?;
        let mut e = Self::new(meta.config_as()?, 0)?;
        e.store.load(path)?;
        e.step = meta.step;
        Ok(e)
    }

    pub fn save(&self, path: &Path) -> Result<(), ParamsError> {
        let mut meta = CheckpointMeta::new(CHECKPOINT_KIND, &self.config, self.step);
        meta.id = self.store.digest()?;
        self.store.save(path, &meta)
    }

    pub fn digest(&self) -> CResult<String> {
        self.store.digest()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    /// Differentiable unit embeddings `(N, dim)` for gray `(N, 1, H, W)`, sides divisible by
    /// [`EmbedderConfig::granularity`].
    pub fn forward(&self, gray: &Tensor) -> CResult<Tensor> {
        let (n, _, h, w) = gray.dims4()?;
        let g = self.config.granularity();
        if h % g != 0 || w % g != 0 {
            candle_core::bail!("embedder input {h}x{w} is not divisible by {g}");
        }
        let mut x = ((gray * 2.0)? - 1.0)?;
        for c in &self.convs {
            x = lrelu(&c.forward(&x)?)?;
        }
        let (_, _, fh, fw) = x.dims4()?;
        let pooled = x.avg_pool2d((fh / GRID, fw / GRID))?.reshape((n, ()))?;
        let r = self.head.forward(&pooled)?;
        let norm = (r.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
        r.broadcast_div(&norm)
    }

    /// [`Self::forward`] after box-downsampling or nearest-upsampling square
    /// input by an integer factor to the configured input size.
    pub fn forward_fit(&self, gray: &Tensor) -> CResult<Tensor> {
        let (_, _, h, w) = gray.dims4()?;
        let s = self.config.input_size;
        if h != w {
            candle_core::bail!("embedder expects square input, got {h}x{w}");
        }
        if h == s {
            self.forward(gray)
        } else if h > s && h % s == 0 {
            self.forward(&gray.avg_pool2d(h / s)?)
        } else if s % h == 0 && (s / h).is_power_of_two() {
            let mut x = gray.clone();
            for _ in 0..(s / h).trailing_zeros() {
                x = up2(&x)?;
            }
            self.forward(&x)
        } else {
            candle_core::bail!("cannot rescale {h}x{h} to the embedder's {s}x{s} by an integer factor")
        }
    }

    fn prepare(&self, gray: &GrayImage) -> GrayImage {
        let s = self.config.input_size;
        if gray.dim() == (s, s) {
            gray.clone()
        } else {
            resize_bilinear(gray, s, s)
        }
    }
}

impl Embedder for LearnedEmbedder {
    fn embed(&self, gray: &GrayImage) -> Embedding {
        let t = images_to_tensor(&[&self.prepare(gray)], self.device()).expect("single image");
        let v = self.forward(&t).and_then(|r| r.flatten_all()?.to_vec1::<f32>()).expect("cpu inference");
        Embedding::from_raw(v)
    }
}

/// Contrastive margin loss over pairs of unit embeddings:
/// genuine pairs pay `d^2`, imposters pay `max(0, margin - d)^2`, averaged.
pub fn contrastive_loss(a: &Tensor, b: &Tensor, genuine: &Tensor, margin: f64) -> CResult<Tensor> {
    let d = ((a - b)?.sqr()?.sum(D::Minus1)? + 1e-12)?.sqrt()?;
    let pos = d.sqr()?;
    let neg = (d.affine(-1.0, margin)?.relu()?).sqr()?;
    let y = genuine.to_dtype(d.dtype())?;
    ((&y * pos)? + ((1.0 - &y)? * neg)?)?.mean_all()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderTrainConfig {
    pub steps: usize,
    /// Pairs per step; half genuine, half imposter.
    pub pairs: usize,
    pub margin: f64,
    pub seed: u64,
    pub opt: AdamConfig,
}

impl Default for EmbedderTrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            pairs: 8,
            margin: 1.0,
            seed: 0,
            opt: AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, decay_every: 0, decay_gamma: 1.0 },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbedderLossRow {
    pub step: usize,
    pub loss: f64,
}

pub fn train_embedder(
    model: &mut LearnedEmbedder,
    dataset: &Dataset,
    cfg: &EmbedderTrainConfig,
) -> Result<Vec<EmbedderLossRow>, TrainError> {
    let items = dataset
        .records()
        .iter()
        .map(|r| Ok((r.finger_id.clone(), dataset.load_image(r)?)))
        .collect::<Result<Vec<_>, TrainError>>()?;
    train_embedder_on(model, &items, cfg)
}

/// `items` pairs a finger identity with one of its impressions.
pub fn train_embedder_on(
    model: &mut LearnedEmbedder,
    items: &[(String, GrayImage)],
    cfg: &EmbedderTrainConfig,
) -> Result<Vec<EmbedderLossRow>, TrainError> {
    let mut by_finger: BTreeMap<&str, Vec<GrayImage>> = BTreeMap::new();
    for (f, g) in items {
        by_finger.entry(f).or_default().push(model.prepare(g));
    }
    let multi: Vec<&Vec<GrayImage>> = by_finger.values().filter(|v| v.len() >= 2).collect();
    let fingers: Vec<&Vec<GrayImage>> = by_finger.values().collect();
    if multi.is_empty() || fingers.len() < 2 || cfg.pairs < 2 {
        return Err(TrainError::Config(
            "embedder training needs two fingers, one with at least two impressions, and at least two pairs per step".into(),
        ));
    }
    let dev = model.device().clone();
    let mut opt = Adam::new(model.store.vars(), cfg.opt)?;
    let mut rng = rng_from(cfg.seed);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut left = Vec::with_capacity(cfg.pairs);
        let mut right = Vec::with_capacity(cfg.pairs);
        let mut labels = Vec::with_capacity(cfg.pairs);
        for k in 0..cfg.pairs {
            if k % 2 == 0 {
                let imps = multi.choose(&mut rng).expect("non-empty");
                let i = rng.random_range(0..imps.len());
                let j = (i + rng.random_range(1..imps.len())) % imps.len();
                left.push(&imps[i]);
                right.push(&imps[j]);
                labels.push(1.0f32);
            } else {
                let a = rng.random_range(0..fingers.len());
                let b = (a + rng.random_range(1..fingers.len())) % fingers.len();
                left.push(fingers[a].choose(&mut rng).expect("non-empty"));
                right.push(fingers[b].choose(&mut rng).expect("non-empty"));
                labels.push(0.0);
            }
        }
        let ra = model.forward(&images_to_tensor(&left, &dev)?)?;
        let rb = model.forward(&images_to_tensor(&right, &dev)?)?;
        let y = Tensor::from_vec(labels, cfg.pairs, &dev)?;
        let loss = contrastive_loss(&ra, &rb, &y, cfg.margin)?;
        opt.step(&loss, step)?;
        let loss = scalar(&loss)?;
        if !loss.is_finite() {
            return Err(TrainError::Diverged(format!("embedder loss is {loss} at step {step}")));
        }
        log.push(EmbedderLossRow { step, loss });
        model.step += 1;
    }
    Ok(log)
}
