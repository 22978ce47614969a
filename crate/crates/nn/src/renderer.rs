//! Stage-3 texture renderer: an encoder-decoder G_t that turns a warped
//! binary impression into a grayscale print, with a texture latent injected
//! as AdaIN scale/shift at every decoder normalization site, and a
//! discriminator D_t with the master-print discriminator topology.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use candle_core::{Device, Result as CResult, Tensor};
use forge_core::binarize::{classical_binarize, to_display_polarity};
use forge_core::dataset::{Dataset, ImpressionRecord};
use forge_core::image::{downsample, harden, resize_bilinear, GrayImage};
use forge_core::material::MaterialLabel;
use forge_core::seed::rng_from;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::binarizer::LearnedBinarizer;
use crate::embedder::LearnedEmbedder;
use crate::gan::{blocks_for, Discriminator};
use crate::layers::{adain, images_to_tensor, lrelu, scalar, tensor_to_images, up2, Conv, Linear};
use crate::losses::{renderer_losses, LossWeights};
use crate::optim::{Adam, AdamConfig};
use crate::params::{read_meta, CheckpointMeta, ParamStore, ParamsError};
use crate::TrainError;

pub const CHECKPOINT_KIND: &str = "renderer";
pub const TEXTURE_DIM: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextureLatent(Vec<f32>);

impl TextureLatent {
    pub fn new(values: Vec<f32>) -> Option<Self> {
        (!values.is_empty() && values.iter().all(|v| v.is_finite())).then_some(Self(values))
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }
}

pub fn sample_texture_latent(seed: u64, dim: usize) -> TextureLatent {
    let mut rng = rng_from(seed);
    TextureLatent((0..dim).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect())
}

/// One `(gamma, beta)` pair per normalization site, bottleneck first.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleParams {
    pub sites: Vec<(Vec<f32>, Vec<f32>)>,
}

/// What a renderer is trained on: pretraining and the live branch use live
/// impressions, the spoof branch all spoofs, fine-tunes a single material.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RenderScope {
    Pretrain,
    Live,
    AllSpoof,
    Material(MaterialLabel),
}

impl RenderScope {
    pub fn tag(&self) -> String {
        match self {
            Self::Pretrain => "pretrain".into(),
            Self::Live => "live".into(),
            Self::AllSpoof => "all_spoof".into(),
            Self::Material(m) => m.as_str().into(),
        }
    }

    pub fn parse(tag: &str) -> Result<Self, TrainError> {
        Ok(match tag {
            "pretrain" => Self::Pretrain,
            "live" => Self::Live,
            "all_spoof" => Self::AllSpoof,
            m => {
                let label = MaterialLabel::new(m).map_err(|e| TrainError::Config(e.to_string()))?;
                if label.is_live() {
                    Self::Live
                } else {
                    Self::Material(label)
                }
            }
        })
    }

    pub fn admits(&self, r: &ImpressionRecord) -> bool {
        match self {
            Self::Pretrain | Self::Live => r.is_live,
            Self::AllSpoof => !r.is_live,
            Self::Material(m) => !r.is_live && &r.material == m,
        }
    }

    /// Whether the output is a spoof rendering.
    pub fn is_spoof(&self) -> bool {
        matches!(self, Self::AllSpoof | Self::Material(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RendererConfig {
    pub in_size: usize,
    pub out_size: usize,
    /// Encoder widths at output resolution and after each of three downsamplings.
    pub channels: [usize; 4],
    pub texture_dim: usize,
    pub style_hidden: usize,
    /// Discriminator widths from `out_size` down to 4x4.
    pub disc_channels: Vec<usize>,
}

impl Default for RendererConfig {
    fn default() -> Self {
        Self {
            in_size: 256,
            out_size: 512,
            channels: [8, 16, 32, 64],
            texture_dim: TEXTURE_DIM,
            style_hidden: 64,
            disc_channels: vec![4, 8, 8, 16, 16, 32, 32, 32],
        }
    }
}

impl RendererConfig {
    /// Reduced widths and resolution for quick runs.
    pub fn small(in_size: usize, out_size: usize) -> Self {
        let k = blocks_for(out_size).unwrap_or(0);
        let disc_channels = (0..=k).map(|i| (4usize << (i / 2)).min(32)).collect();
        Self { in_size, out_size, channels: [8, 8, 16, 16], disc_channels, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.in_size == 0 || self.out_size % self.in_size != 0 || !(self.out_size / self.in_size).is_power_of_two() {
            return Err(format!("output {} must be the input {} times a power of two", self.out_size, self.in_size));
        }
        if self.out_size % 8 != 0 {
            return Err("output size must be divisible by 8".into());
        }
        let k = blocks_for(self.out_size).ok_or(format!("output size {} is not 4 * 2^k", self.out_size))?;
        if self.disc_channels.len() != k + 1 {
            return Err(format!("need {} discriminator widths", k + 1));
        }
        if self.channels.contains(&0) || self.texture_dim == 0 || self.style_hidden == 0 {
            return Err("widths must be positive".into());
        }
        Ok(())
    }

    /// Channel count of each normalization site, bottleneck first.
    pub fn site_channels(&self) -> [usize; 4] {
        let c = self.channels;
        [c[3], c[2], c[1], c[0]]
    }
}

struct GeneratorT {
    upsample: u32,
    stem: Conv,
    downs: Vec<Conv>,
    bottleneck: Conv,
    ups: Vec<Conv>,
    out: Conv,
    style1: Linear,
    style2: Linear,
    sites: [usize; 4],
}

impl GeneratorT {
    fn new(p: &mut ParamStore, cfg: &RendererConfig) -> CResult<Self> {
        let c = cfg.channels;
        let stem = Conv::new(p, "gt.stem", 1, c[0], 3, 1)?;
        let downs = (0..3).map(|i| Conv::new(p, &format!("gt.down{i}"), c[i], c[i + 1], 3, 2)).collect::<CResult<_>>()?;
        let bottleneck = Conv::new(p, "gt.bottleneck", c[3], c[3], 3, 1)?;
        let ups = (0..3).map(|i| Conv::new(p, &format!("gt.up{i}"), c[i + 1], c[i], 3, 1)).collect::<CResult<_>>()?;
        let out = Conv::new(p, "gt.out", c[0], 1, 3, 1)?;
        let sites = cfg.site_channels();
        let style1 = Linear::new(p, "gt.style1", cfg.texture_dim, cfg.style_hidden, 1.0)?;
        // small initial modulation so an untrained model is close to plain instance norm
        let style2 = Linear::new(p, "gt.style2", cfg.style_hidden, 2 * sites.iter().sum::<usize>(), 0.1)?;
        Ok(Self { upsample: (cfg.out_size / cfg.in_size).trailing_zeros(), stem, downs, bottleneck, ups, out, style1, style2, sites })
    }

    /// `(N, 2 * sum(sites))` from `(N, texture_dim)`.
    fn style(&self, z: &Tensor) -> CResult<Tensor> {
        self.style2.forward(&lrelu(&self.style1.forward(z)?)?)
    }

    fn forward(&self, i_w: &Tensor, z: &Tensor) -> CResult<Tensor> {
        let style = self.style(z)?;
        let mut off = 0;
        let mut site = |c: usize| -> CResult<(Tensor, Tensor)> {
            let g = style.narrow(1, off, c)?;
            let b = style.narrow(1, off + c, c)?;
            off += 2 * c;
            Ok((g, b))
        };
        let mut x = i_w.clone();
        for _ in 0..self.upsample {
            x = up2(&x)?;
        }
        let mut skips = vec![lrelu(&self.stem.forward(&((x * 2.0)? - 1.0)?)?)?];
        for d in &self.downs {
            let h = lrelu(&d.forward(skips.last().expect("stem"))?)?;
            skips.push(h);
        }
        let (g, b) = site(self.sites[0])?;
        let mut h = lrelu(&adain(&self.bottleneck.forward(&skips.pop().expect("deepest"))?, &g, &b)?)?;
        for (i, u) in self.ups.iter().enumerate().rev() {
            let (g, b) = site(self.sites[3 - i])?;
            h = (u.forward(&up2(&h)?)? + &skips[i])?;
            h = lrelu(&adain(&h, &g, &b)?)?;
        }
        candle_nn::ops::sigmoid(&self.out.forward(&h)?)
    }
}

pub struct Renderer {
    pub config: RendererConfig,
    pub material: String,
    pub parent: Option<String>,
    store: ParamStore,
    generator: GeneratorT,
    discriminator: Discriminator,
    pub step: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum RenderError {
    #[error("warped binary is {found:?}, renderer expects {expected}x{expected}")]
    ShapeMismatch { expected: usize, found: (usize, usize) },
    #[error("texture latent has {found} values, renderer expects {expected}")]
    LatentMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Candle(#[from] candle_core::Error),
}

impl Renderer {
    pub fn new(config: RendererConfig, material: &str, seed: u64) -> Result<Self, ParamsError> {
        config.validate().map_err(|m| ParamsError::Checkpoint { path: "<config>".into(), message: m })?;
        let mut store = ParamStore::new(seed);
        let generator = GeneratorT::new(&mut store, &config)?;
        let discriminator = Discriminator::new(&mut store, "dt", &config.disc_channels)?;
        Ok(Self { config, material: material.into(), parent: None, store, generator, discriminator, step: 0 })
    }

    pub fn load(path: &Path) -> Result<Self, ParamsError> {
        let meta = read_meta(path)?;
        meta.expect_kind(CHECKPOINT_KIND)?;
        let mut r = Self::new(meta.config_as()?, meta.material.as_deref().unwrap_or("pretrain"), 0)?;
        r.store.load(path)?;
        r.parent = meta.parent;
        r.step = meta.step;
        Ok(r)
    }

    pub fn save(&self, path: &Path) -> Result<(), ParamsError> {
        let mut meta = CheckpointMeta::new(CHECKPOINT_KIND, &self.config, self.step);
        meta.id = self.id()?;
        meta.material = Some(self.material.clone());
        meta.parent = self.parent.clone();
        self.store.save(path, &meta)
    }

    /// Content digest of the weights; parents are referenced by this id.
    pub fn id(&self) -> CResult<String> {
        self.store.digest()
    }

    /// Independent copy, for branching a child model off this one.
    pub fn fork(&self, material: &str) -> Result<Self, ParamsError> {
        let mut child = Self::new(self.config.clone(), material, 0)?;
        for (dst, src) in child.store.vars().iter().zip(self.store.vars()) {
            dst.set(&src.as_tensor().copy()?)?;
        }
        child.parent = Some(self.id()?);
        child.step = self.step;
        Ok(child)
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn style_params(&self, z: &TextureLatent) -> Result<StyleParams, RenderError> {
        let zt = self.latent_tensor(z)?;
        let flat = self.generator.style(&zt)?.flatten_all()?.to_vec1::<f32>()?;
        let mut off = 0;
        let sites = self
            .generator
            .sites
            .iter()
            .map(|&c| {
                let pair = (flat[off..off + c].to_vec(), flat[off + c..off + 2 * c].to_vec());
                off += 2 * c;
                pair
            })
            .collect();
        Ok(StyleParams { sites })
    }

    fn latent_tensor(&self, z: &TextureLatent) -> Result<Tensor, RenderError> {
        if z.0.len() != self.config.texture_dim {
            return Err(RenderError::LatentMismatch { expected: self.config.texture_dim, found: z.0.len() });
        }
        Ok(Tensor::from_vec(z.0.clone(), (1, z.0.len()), self.device())?)
    }

    /// Differentiable rendering of `(N, 1, in, in)` warped binaries.
    pub fn forward(&self, i_w: &Tensor, z: &Tensor) -> CResult<Tensor> {
        self.generator.forward(i_w, z)
    }

    /// Grayscale `out_size` print in `[0, 1]` for a display-polarity warped binary.
    pub fn render_texture(&self, i_w: &GrayImage, z: &TextureLatent) -> Result<GrayImage, RenderError> {
        let s = self.config.in_size;
        if i_w.dim() != (s, s) {
            return Err(RenderError::ShapeMismatch { expected: s, found: i_w.dim() });
        }
        let zt = self.latent_tensor(z)?;
        let x = images_to_tensor(&[i_w], self.device())?;
        Ok(tensor_to_images(&self.forward(&x, &zt)?)?.remove(0))
    }
}

/// A real print at `out_size` and its display-polarity binary at `in_size`.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderPair {
    pub real: GrayImage,
    pub warped: GrayImage,
}

pub fn render_pair(gray: &GrayImage, cfg: &RendererConfig) -> RenderPair {
    let real = if gray.dim() == (cfg.out_size, cfg.out_size) {
        gray.clone()
    } else {
        resize_bilinear(gray, cfg.out_size, cfg.out_size)
    };
    let binary = to_display_polarity(&classical_binarize(&real));
    let warped = harden(&downsample(&binary, cfg.out_size / cfg.in_size), 0.5);
    RenderPair { real, warped }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RendererTrainConfig {
    /// Steps for pretraining and the live / all-spoof branches.
    pub steps: usize,
    /// Per-material fine-tunes run this many passes over the material's records.
    pub finetune_epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub generator_opt: AdamConfig,
    pub discriminator_opt: AdamConfig,
}

impl Default for RendererTrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            finetune_epochs: 3,
            batch: 2,
            seed: 0,
            weights: LossWeights::default(),
            generator_opt: AdamConfig::default(),
            discriminator_opt: AdamConfig::default(),
        }
    }
}

impl RendererTrainConfig {
    pub fn steps_for(&self, scope: &RenderScope, records: usize) -> usize {
        match scope {
            RenderScope::Material(_) => self.finetune_epochs * records.div_ceil(self.batch.max(1)),
            _ => self.steps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RendererLossRow {
    pub step: usize,
    pub l_adv: f64,
    pub l_dp: f64,
    pub l_i: f64,
    pub l_d: f64,
}

/// Trains one tier of the schedule. Fine-tunes need a parent; every scope
/// needs at least one admitted record. Embedder and binarizer stay frozen.
pub fn train_renderer(
    dataset: &Dataset,
    init: Option<&Renderer>,
    scope: &RenderScope,
    embedder: &LearnedEmbedder,
    binarizer: &LearnedBinarizer,
    model_cfg: &RendererConfig,
    cfg: &RendererTrainConfig,
) -> Result<(Renderer, Vec<RendererLossRow>), TrainError> {
    if matches!(scope, RenderScope::Material(_)) && init.is_none() {
        return Err(TrainError::Lineage(format!("fine-tuning {} needs a parent checkpoint", scope.tag())));
    }
    let records: Vec<&ImpressionRecord> = dataset.records().iter().filter(|r| scope.admits(r)).collect();
    if records.is_empty() {
        return Err(TrainError::EmptyMaterial(scope.tag()));
    }
    let mut model = match init {
        Some(parent) => parent.fork(&scope.tag())?,
        None => Renderer::new(model_cfg.clone(), &scope.tag(), cfg.seed)?,
    };
    let pairs = records
        .iter()
        .map(|r| Ok(render_pair(&dataset.load_image(r)?, &model.config)))
        .collect::<Result<Vec<_>, TrainError>>()?;
    let steps = cfg.steps_for(scope, pairs.len());
    let log = train_renderer_on(&mut model, &pairs, embedder, binarizer, cfg, steps)?;
    Ok((model, log))
}

pub fn train_renderer_on(
    model: &mut Renderer,
    pairs: &[RenderPair],
    embedder: &LearnedEmbedder,
    binarizer: &LearnedBinarizer,
    cfg: &RendererTrainConfig,
    steps: usize,
) -> Result<Vec<RendererLossRow>, TrainError> {
    let (ins, outs) = (model.config.in_size, model.config.out_size);
    if pairs.is_empty() || cfg.batch == 0 {
        return Err(TrainError::Config("renderer training needs pairs and a positive batch".into()));
    }
    if let Some(p) = pairs.iter().find(|p| p.real.dim() != (outs, outs) || p.warped.dim() != (ins, ins)) {
        return Err(TrainError::Config(format!("pair shapes {:?}/{:?} do not match {outs}/{ins}", p.real.dim(), p.warped.dim())));
    }
    let dev = model.device().clone();
    let mut opt_g = Adam::new(model.store.vars_with_prefix("gt."), cfg.generator_opt)?;
    let mut opt_d = Adam::new(model.store.vars_with_prefix("dt."), cfg.discriminator_opt)?;
    let mut rng = rng_from(cfg.seed ^ model.step.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let factor = (outs / ins).trailing_zeros();
    let mut log = Vec::with_capacity(steps);
    for step in 0..steps {
        let batch: Vec<&RenderPair> = (0..cfg.batch).map(|_| &pairs[rng.random_range(0..pairs.len())]).collect();
        let real = images_to_tensor(&batch.iter().map(|p| &p.real).collect::<Vec<_>>(), &dev)?;
        let warped = images_to_tensor(&batch.iter().map(|p| &p.warped).collect::<Vec<_>>(), &dev)?;
        let z: Vec<f32> = (0..cfg.batch * model.config.texture_dim).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect();
        let z = Tensor::from_vec(z, (cfg.batch, model.config.texture_dim), &dev)?;

        let fake = model.forward(&warped, &z)?;
        let d_real = model.discriminator.forward(&real)?;
        let d_fake = model.discriminator.forward(&fake.detach())?;
        let loss_d = crate::losses::adversarial_loss(&d_real, &d_fake)?.loss_d;
        opt_d.step(&loss_d, step)?;

        let d_fake = model.discriminator.forward(&fake)?;
        let r = embedder.forward_fit(&real)?.detach();
        let r_hat = embedder.forward_fit(&fake)?;
        let mut i_w = warped.clone();
        for _ in 0..factor {
            i_w = up2(&i_w)?;
        }
        // display polarity: the binarizer marks ridges with 1, binaries with 0
        let i_w_hat = (1.0 - binarizer.forward(&fake)?)?;
        let losses = renderer_losses(&r, &r_hat, &i_w, &i_w_hat, &d_real.detach(), &d_fake, &cfg.weights)?;
        opt_g.step(&losses.generator, step)?;

        let row = RendererLossRow {
            step,
            l_adv: scalar(&losses.adv)?,
            l_dp: scalar(&losses.dp)?,
            l_i: scalar(&losses.i)?,
            l_d: scalar(&loss_d)?,
        };
        if ![row.l_adv, row.l_dp, row.l_i, row.l_d].iter().all(|v| v.is_finite()) {
            return Err(TrainError::Diverged(format!("non-finite renderer loss at step {step}")));
        }
        log.push(row);
        model.step += 1;
    }
    Ok(log)
}

/// One trained checkpoint in the schedule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineageEntry {
    pub material: String,
    pub path: PathBuf,
    pub id: String,
    pub parent: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lineage {
    pub entries: Vec<LineageEntry>,
}

impl Lineage {
    pub fn get(&self, material: &str) -> Option<&LineageEntry> {
        self.entries.iter().find(|e| e.material == material)
    }

    /// Every parent id names an earlier entry, so the graph is acyclic.
    pub fn validate(&self) -> Result<(), TrainError> {
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if let Some(p) = &e.parent {
                if !seen.contains(p.as_str()) {
                    return Err(TrainError::Lineage(format!("{} has parent {p} which is not an earlier checkpoint", e.material)));
                }
            }
            if !seen.insert(e.id.as_str()) {
                return Err(TrainError::Lineage(format!("duplicate checkpoint id {}", e.id)));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// Losses from every tier, keyed by the tier's material tag.
pub type ScheduleLogs = Vec<(String, Vec<RendererLossRow>)>;

/// Pretrain on lives, branch into live and all-spoof models, then fine-tune
/// one model per spoof material from the all-spoof model. Checkpoints and
/// `lineage.json` are written under `out_dir`.
pub fn train_renderer_schedule(
    dataset: &Dataset,
    embedder: &LearnedEmbedder,
    binarizer: &LearnedBinarizer,
    model_cfg: &RendererConfig,
    cfg: &RendererTrainConfig,
    out_dir: &Path,
) -> Result<(Lineage, ScheduleLogs), TrainError> {
    std::fs::create_dir_all(out_dir).map_err(|e| TrainError::Config(format!("{}: {e}", out_dir.display())))?;
    let mut lineage = Lineage::default();
    let mut logs = Vec::new();
    let mut record = |model: &Renderer, log: Vec<RendererLossRow>, lineage: &mut Lineage| -> Result<(), TrainError> {
        let path = out_dir.join(format!("renderer_{}.safetensors", model.material));
        model.save(&path)?;
        lineage.entries.push(LineageEntry { material: model.material.clone(), path, id: model.id()?, parent: model.parent.clone() });
        logs.push((model.material.clone(), log));
        Ok(())
    };
    let (pre, log) = train_renderer(dataset, None, &RenderScope::Pretrain, embedder, binarizer, model_cfg, cfg)?;
    record(&pre, log, &mut lineage)?;
    let (live, log) = train_renderer(dataset, Some(&pre), &RenderScope::Live, embedder, binarizer, model_cfg, cfg)?;
    record(&live, log, &mut lineage)?;
    let (spoof, log) = train_renderer(dataset, Some(&pre), &RenderScope::AllSpoof, embedder, binarizer, model_cfg, cfg)?;
    record(&spoof, log, &mut lineage)?;
    for m in dataset.materials().into_iter().filter(|m| !m.is_live()) {
        let scope = RenderScope::Material(m);
        let (ft, log) = train_renderer(dataset, Some(&spoof), &scope, embedder, binarizer, model_cfg, cfg)?;
        record(&ft, log, &mut lineage)?;
    }
    lineage.validate()?;
    lineage.save(&out_dir.join("lineage.json")).map_err(|e| TrainError::Config(format!("lineage.json: {e}")))?;
    Ok((lineage, logs))
}
