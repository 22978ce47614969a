//! Learned ridge binarizer: a small convolutional U-shaped autoencoder
//! trained against the classical teacher. Its tensor path is differentiable
//! and is what the renderer's pixel loss runs through.

use std::path::Path;

use candle_core::{Device, Result as CResult, Tensor};
use forge_core::binarize::{classical_binarize, RidgeBinarizer};
use forge_core::dataset::Dataset;
use forge_core::image::{is_binary, GrayImage};
use forge_core::seed::rng_from;
use ndarray::{s, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::layers::{bce_with_logits, images_to_tensor, lrelu, scalar, tensor_to_images, up2, Conv};
use crate::optim::{Adam, AdamConfig};
use crate::params::{CheckpointMeta, ParamStore, ParamsError};
use crate::TrainError;

pub const CHECKPOINT_KIND: &str = "binarizer";
/// Spatial sizes must be a multiple of this (four stride-2 levels).
pub const ALIGN: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinarizerConfig {
    /// Widths at full resolution and after each of the four downsamplings.
    pub channels: [usize; 5],
    /// Inference tile edge; larger inputs are processed in overlapping tiles.
    pub tile: usize,
    pub tile_margin: usize,
}

impl Default for BinarizerConfig {
    fn default() -> Self {
        Self { channels: [8, 8, 16, 16, 32], tile: 256, tile_margin: 32 }
    }
}

struct Net {
    stem: Conv,
    downs: Vec<Conv>,
    ups: Vec<Conv>,
    out: Conv,
}

impl Net {
    fn new(p: &mut ParamStore, c: &[usize; 5]) -> CResult<Self> {
        let stem = Conv::new(p, "bin.stem", 1, c[0], 3, 1)?;
        let downs = (0..4).map(|i| Conv::new(p, &format!("bin.down{i}"), c[i], c[i + 1], 3, 2)).collect::<CResult<_>>()?;
        let ups = (0..4).map(|i| Conv::new(p, &format!("bin.up{i}"), c[i + 1], c[i], 3, 1)).collect::<CResult<_>>()?;
        let out = Conv::new(p, "bin.out", c[0], 1, 3, 1)?;
        Ok(Self { stem, downs, ups, out })
    }

    /// Logits for gray input with sides divisible by [`ALIGN`].
    fn logits(&self, x: &Tensor) -> CResult<Tensor> {
        let mut levels = vec![lrelu(&self.stem.forward(&((x * 2.0)? - 1.0)?)?)?];
        for d in &self.downs {
            let h = lrelu(&d.forward(levels.last().expect("stem"))?)?;
            levels.push(h);
        }
        // The bottleneck has no skip; each level above it adds its encoder features.
        let mut h = levels.pop().expect("bottleneck");
        for (i, u) in self.ups.iter().enumerate().rev() {
            h = (lrelu(&u.forward(&up2(&h)?)?)? + &levels[i])?;
        }
        self.out.forward(&h)
    }
}

pub struct LearnedBinarizer {
    pub config: BinarizerConfig,
    store: ParamStore,
    net: Net,
    pub step: u64,
}

impl LearnedBinarizer {
    pub fn new(config: BinarizerConfig, seed: u64) -> Result<Self, ParamsError> {
        if config.tile % ALIGN != 0 || config.tile <= 2 * config.tile_margin || config.channels.contains(&0) {
            return Err(ParamsError::Checkpoint { path: "<config>".into(), message: format!("invalid binarizer config {config:?}") });
        }
        let mut store = ParamStore::new(seed);
        let net = Net::new(&mut store, &config.channels)?;
        Ok(Self { config, store, net, step: 0 })
    }

    pub fn load(path: &Path) -> Result<Self, ParamsError> {
        let meta = crate::params::read_meta(path)?;
        meta.expect_kind(CHECKPOINT_KIND)?;
        let mut b = Self::new(meta.config_as()?, 0)?;
        b.store.load(path)?;
        b.step = meta.step;
        Ok(b)
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

    /// Differentiable ridge probabilities for `(N, 1, H, W)` gray input of any size.
    /// Sides are padded with white up to a multiple of [`ALIGN`] and cropped back.
    pub fn forward(&self, gray: &Tensor) -> CResult<Tensor> {
        Ok(candle_nn::ops::sigmoid(&self.forward_logits(gray)?)?)
    }

    fn forward_logits(&self, gray: &Tensor) -> CResult<Tensor> {
        let (_, _, h, w) = gray.dims4()?;
        let (ph, pw) = (h.next_multiple_of(ALIGN) - h, w.next_multiple_of(ALIGN) - w);
        if ph == 0 && pw == 0 {
            return self.net.logits(gray);
        }
        let padded = (gray - 1.0)?.pad_with_zeros(2, 0, ph)?.pad_with_zeros(3, 0, pw)? + 1.0;
        self.net.logits(&padded?)?.narrow(2, 0, h)?.narrow(3, 0, w)
    }

    /// Soft ridge map (ridge = 1) for one image, tiled when larger than the tile size.
    pub fn binarize(&self, gray: &GrayImage) -> CResult<GrayImage> {
        let (h, w) = gray.dim();
        let mut out = Array2::<f32>::zeros((h, w));
        for (sy, sh, dy, dh) in tile_spans(h, self.config.tile, self.config.tile_margin) {
            for (sx, sw, dx, dw) in tile_spans(w, self.config.tile, self.config.tile_margin) {
                let window = gray.slice(s![sy..sy + sh, sx..sx + sw]).to_owned();
                let t = images_to_tensor(&[&window], self.device())?;
                let prob = tensor_to_images(&self.forward(&t)?)?.remove(0);
                out.slice_mut(s![dy..dy + dh, dx..dx + dw])
                    .assign(&prob.slice(s![dy - sy..dy - sy + dh, dx - sx..dx - sx + dw]));
            }
        }
        Ok(out)
    }
}

impl RidgeBinarizer for LearnedBinarizer {
    fn ridge_map(&self, gray: &GrayImage) -> GrayImage {
        self.binarize(gray).expect("cpu inference on a well-formed image")
    }
}

/// `(source start, source len, dest start, dest len)` along one axis. Each
/// destination span keeps at least `margin` pixels of context unless it touches
/// the image border.
pub fn tile_spans(len: usize, tile: usize, margin: usize) -> Vec<(usize, usize, usize, usize)> {
    if len <= tile {
        return vec![(0, len, 0, len)];
    }
    let core = tile - 2 * margin;
    (0..len)
        .step_by(core)
        .map(|c| {
            let src = c.saturating_sub(margin).min(len - tile);
            (src, tile, c, core.min(len - c))
        })
        .collect()
}

/// A grayscale image with its {0,1} ridge target.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryPair {
    pub gray: GrayImage,
    pub binary: GrayImage,
}

/// Pairs every record of `dataset` with its classical ridge map.
pub fn teacher_pairs(dataset: &Dataset) -> Result<Vec<BinaryPair>, TrainError> {
    dataset
        .records()
        .iter()
        .map(|r| {
            let gray = dataset.load_image(r)?;
            Ok(BinaryPair { binary: classical_binarize(&gray), gray })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinarizerTrainConfig {
    pub steps: usize,
    pub batch: usize,
    /// Square random crop edge, a multiple of 16.
    pub crop: usize,
    pub seed: u64,
    pub opt: AdamConfig,
}

impl Default for BinarizerTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 8,
            crop: 64,
            seed: 0,
            opt: AdamConfig { lr: 2e-3, beta1: 0.9, beta2: 0.999, decay_every: 800, decay_gamma: 0.5 },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinarizerLossRow {
    pub step: usize,
    pub loss: f64,
}

/// Mean per-pixel binary cross-entropy on random crops.
pub fn train_binarizer(
    model: &mut LearnedBinarizer,
    pairs: &[BinaryPair],
    cfg: &BinarizerTrainConfig,
) -> Result<Vec<BinarizerLossRow>, TrainError> {
    if pairs.is_empty() || cfg.batch == 0 || cfg.crop == 0 || cfg.crop % ALIGN != 0 {
        return Err(TrainError::Config("binarizer training needs pairs, a positive batch and a crop divisible by 16".into()));
    }
    for (i, p) in pairs.iter().enumerate() {
        if p.gray.dim() != p.binary.dim() {
            return Err(TrainError::Config(format!("pair {i}: gray {:?} vs binary {:?}", p.gray.dim(), p.binary.dim())));
        }
        if !is_binary(&p.binary) {
            return Err(TrainError::Config(format!("pair {i}: target is not {{0,1}}")));
        }
        let (h, w) = p.gray.dim();
        if h < cfg.crop || w < cfg.crop {
            return Err(TrainError::Config(format!("pair {i}: {h}x{w} is smaller than the {} crop", cfg.crop)));
        }
    }
    let dev = model.device().clone();
    let mut opt = Adam::new(model.store.vars(), cfg.opt)?;
    let mut rng = rng_from(cfg.seed);
    let mut log = Vec::with_capacity(cfg.steps);
    let c = cfg.crop;
    for step in 0..cfg.steps {
        let mut grays = Vec::with_capacity(cfg.batch);
        let mut bins = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let p = &pairs[rng.random_range(0..pairs.len())];
            let (h, w) = p.gray.dim();
            let (y, x) = (rng.random_range(0..=h - c), rng.random_range(0..=w - c));
            grays.push(p.gray.slice(s![y..y + c, x..x + c]).to_owned());
            bins.push(p.binary.slice(s![y..y + c, x..x + c]).to_owned());
        }
        let x = images_to_tensor(&grays.iter().collect::<Vec<_>>(), &dev)?;
        let t = images_to_tensor(&bins.iter().collect::<Vec<_>>(), &dev)?;
        let loss = bce_with_logits(&model.forward_logits(&x)?, &t)?;
        opt.step(&loss, step)?;
        let loss = scalar(&loss)?;
        if !loss.is_finite() {
            return Err(TrainError::Diverged(format!("binarizer loss is {loss} at step {step}")));
        }
        log.push(BinarizerLossRow { step, loss });
        model.step += 1;
    }
    Ok(log)
}

/// Fraction of pixels where `soft >= 0.5` agrees with `target >= 0.5`.
pub fn pixel_accuracy(soft: &GrayImage, target: &GrayImage) -> f64 {
    assert_eq!(soft.dim(), target.dim());
    let hits = soft.iter().zip(target).filter(|(a, b)| (**a >= 0.5) == (**b >= 0.5)).count();
    hits as f64 / soft.len().max(1) as f64
}
