//! Stage-1 master-print GAN: a residual up-sampling generator from a
//! 256-d identity latent to a soft binary ridge map, and a mirrored residual
//! discriminator (also reused by the texture renderer).

use std::path::Path;

use candle_core::{Device, Result as CResult, Tensor};
use forge_core::binarize::{classical_binarize, to_display_polarity};
use forge_core::dataset::Dataset;
use forge_core::image::{harden, resize_bilinear, GrayImage};
use forge_core::seed::rng_from;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::layers::{down2, images_to_tensor, lrelu, scalar, tensor_to_images, up2, Conv, Linear};
use crate::losses::adversarial_loss;
use crate::optim::{Adam, AdamConfig};
use crate::params::{CheckpointMeta, ParamStore, ParamsError};
use crate::TrainError;

pub const LATENT_DIM: usize = 256;
pub const MASTERPRINT_SIZE: usize = 256;
pub const CHECKPOINT_KIND: &str = "masterprint_gan";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityLatent(Vec<f32>);

impl IdentityLatent {
    pub fn new(values: Vec<f32>) -> Option<Self> {
        (values.len() == LATENT_DIM && values.iter().all(|v| v.is_finite())).then_some(Self(values))
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }
}

/// 256 i.i.d. standard-normal values from a seeded stream.
pub fn sample_identity_latent(seed: u64) -> IdentityLatent {
    let mut rng = rng_from(seed);
    IdentityLatent((0..LATENT_DIM).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect())
}

/// Soft ridge map in display polarity (ridges near 0, background near 1).
#[derive(Debug, Clone, PartialEq)]
pub struct MasterPrint {
    pub image: GrayImage,
    pub threshold: f32,
}

impl MasterPrint {
    pub fn hard(&self) -> GrayImage {
        harden(&self.image, self.threshold)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanConfig {
    pub latent_dim: usize,
    pub resolution: usize,
    /// Generator widths from the 4x4 base to full resolution; one more than the number of up-blocks.
    pub channels: Vec<usize>,
    /// Discriminator widths from full resolution down to 4x4.
    pub disc_channels: Vec<usize>,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            latent_dim: LATENT_DIM,
            resolution: MASTERPRINT_SIZE,
            channels: vec![32, 32, 16, 16, 8, 8, 4],
            disc_channels: vec![4, 8, 8, 16, 16, 32, 32],
        }
    }
}

/// Number of 2x steps between 4x4 and `resolution`, if it is `4 * 2^k`.
pub fn blocks_for(resolution: usize) -> Option<usize> {
    (resolution >= 4 && resolution % 4 == 0 && (resolution / 4).is_power_of_two())
        .then(|| (resolution / 4).trailing_zeros() as usize)
}

impl GanConfig {
    /// A reduced generator for tests and quick runs.
    pub fn small(resolution: usize) -> Self {
        let k = blocks_for(resolution).expect("resolution must be 4 * 2^k");
        let channels = (0..=k).map(|i| (32 >> i.min(3)).max(4)).collect::<Vec<_>>();
        let mut disc_channels = channels.clone();
        disc_channels.reverse();
        Self { latent_dim: LATENT_DIM, resolution, channels, disc_channels }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        let k = blocks_for(self.resolution).ok_or(format!("resolution {} is not 4 * 2^k", self.resolution))?;
        if self.channels.len() != k + 1 || self.disc_channels.len() != k + 1 {
            return Err(format!("need {} channel entries for resolution {}", k + 1, self.resolution));
        }
        if self.latent_dim == 0 || self.channels.iter().chain(&self.disc_channels).any(|&c| c == 0) {
            return Err("widths must be positive".into());
        }
        Ok(())
    }
}

struct UpBlock {
    c1: Conv,
    c2: Conv,
    skip: Conv,
}

pub struct Generator {
    fc: Linear,
    base: usize,
    blocks: Vec<UpBlock>,
    out: Conv,
}

impl Generator {
    pub fn new(p: &mut ParamStore, prefix: &str, cfg: &GanConfig) -> CResult<Self> {
        let c0 = cfg.channels[0];
        let fc = Linear::new(p, &format!("{prefix}.fc"), cfg.latent_dim, c0 * 16, 1.0)?;
        let mut blocks = Vec::new();
        for (i, w) in cfg.channels.windows(2).enumerate() {
            let n = format!("{prefix}.up{i}");
            blocks.push(UpBlock {
                c1: Conv::new(p, &format!("{n}.c1"), w[0], w[1], 3, 1)?,
                c2: Conv::new(p, &format!("{n}.c2"), w[1], w[1], 3, 1)?,
                skip: Conv::new(p, &format!("{n}.skip"), w[0], w[1], 1, 1)?,
            });
        }
        let last = *cfg.channels.last().expect("validated");
        let out = Conv::new(p, &format!("{prefix}.out"), last, 1, 3, 1)?;
        Ok(Self { fc, base: c0, blocks, out })
    }

    /// `z: (N, latent)` to `(N, 1, R, R)` in `[0, 1]`.
    pub fn forward(&self, z: &Tensor) -> CResult<Tensor> {
        let n = z.dim(0)?;
        let mut x = self.fc.forward(z)?.reshape((n, self.base, 4, 4))?;
        for b in &self.blocks {
            let h = b.c1.forward(&up2(&lrelu(&x)?)?)?;
            let h = b.c2.forward(&lrelu(&h)?)?;
            x = (h + b.skip.forward(&up2(&x)?)?)?;
        }
        candle_nn::ops::sigmoid(&self.out.forward(&lrelu(&x)?)?)
    }
}

struct DownBlock {
    c1: Conv,
    c2: Conv,
    skip: Conv,
}

pub struct Discriminator {
    stem: Conv,
    blocks: Vec<DownBlock>,
    head: Linear,
}

impl Discriminator {
    /// `channels` from full resolution down to the 4x4 level.
    pub fn new(p: &mut ParamStore, prefix: &str, channels: &[usize]) -> CResult<Self> {
        let stem = Conv::new(p, &format!("{prefix}.stem"), 1, channels[0], 3, 1)?;
        let mut blocks = Vec::new();
        for (i, w) in channels.windows(2).enumerate() {
            let n = format!("{prefix}.down{i}");
            blocks.push(DownBlock {
                c1: Conv::new(p, &format!("{n}.c1"), w[0], w[0], 3, 1)?,
                c2: Conv::new(p, &format!("{n}.c2"), w[0], w[1], 3, 2)?,
                skip: Conv::new(p, &format!("{n}.skip"), w[0], w[1], 1, 1)?,
            });
        }
        let head = Linear::new(p, &format!("{prefix}.head"), *channels.last().expect("non-empty"), 1, 1.0)?;
        Ok(Self { stem, blocks, head })
    }

    /// Images in `[0, 1]` to one logit per sample, shape `(N,)`.
    pub fn forward(&self, x: &Tensor) -> CResult<Tensor> {
        let mut x = self.stem.forward(&((x * 2.0)? - 1.0)?)?;
        for b in &self.blocks {
            let h = b.c1.forward(&lrelu(&x)?)?;
            let h = b.c2.forward(&lrelu(&h)?)?;
            x = (h + b.skip.forward(&down2(&x)?)?)?;
        }
        let pooled = lrelu(&x)?.mean((2, 3))?;
        self.head.forward(&pooled)?.squeeze(1)
    }
}

pub struct MasterPrintGan {
    pub config: GanConfig,
    store: ParamStore,
    generator: Generator,
    discriminator: Discriminator,
    pub step: u64,
}

impl MasterPrintGan {
    pub fn new(config: GanConfig, seed: u64) -> std::result::Result<Self, ParamsError> {
        config.validate().map_err(|m| ParamsError::Checkpoint { path: "<config>".into(), message: m })?;
        let mut store = ParamStore::new(seed);
        let generator = Generator::new(&mut store, "g", &config)?;
        let discriminator = Discriminator::new(&mut store, "d", &config.disc_channels)?;
        Ok(Self { config, store, generator, discriminator, step: 0 })
    }

    pub fn load(path: &Path) -> std::result::Result<Self, ParamsError> {
        let meta = crate::params::read_meta(path)?;
        meta.expect_kind(CHECKPOINT_KIND)?;
        let mut gan = Self::new(meta.config_as()?, 0)?;
        gan.store.load(path)?;
        gan.step = meta.step;
        Ok(gan)
    }

    pub fn save(&self, path: &Path) -> std::result::Result<(), ParamsError> {
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

    pub fn generate(&self, z: &IdentityLatent) -> CResult<MasterPrint> {
        if z.0.len() != self.config.latent_dim {
            candle_core::bail!("latent has {} values, generator expects {}", z.0.len(), self.config.latent_dim);
        }
        let zt = Tensor::from_vec(z.0.clone(), (1, z.0.len()), self.device())?;
        let img = tensor_to_images(&self.generator.forward(&zt)?)?.remove(0);
        Ok(MasterPrint { image: img, threshold: 0.5 })
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn discriminator(&self) -> &Discriminator {
        &self.discriminator
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub generator_opt: AdamConfig,
    pub discriminator_opt: AdamConfig,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch: 8,
            seed: 0,
            generator_opt: AdamConfig::default(),
            discriminator_opt: AdamConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GanLossRow {
    pub step: usize,
    pub loss_g: f64,
    pub loss_d: f64,
}

/// Classical ridge map of a live impression, in display polarity, resized to
/// `size` and re-hardened.
pub fn master_target(gray: &GrayImage, size: usize) -> GrayImage {
    let ridges = to_display_polarity(&classical_binarize(gray));
    harden(&resize_bilinear(&ridges, size, size), 0.5)
}

/// Trains on the live records of `dataset`; any spoof record is rejected.
pub fn train_masterprint_gan(
    dataset: &Dataset,
    gan: &mut MasterPrintGan,
    cfg: &GanTrainConfig,
) -> std::result::Result<Vec<GanLossRow>, TrainError> {
    if let Some(r) = dataset.records().iter().find(|r| !r.is_live) {
        return Err(TrainError::Config(format!("master-print training takes live impressions only; found {}", r.key())));
    }
    let size = gan.config.resolution;
    let targets = dataset
        .records()
        .iter()
        .map(|r| dataset.load_image(r).map(|g| master_target(&g, size)))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    train_gan_on_images(gan, &targets, cfg)
}

/// One discriminator and one generator update per step on binary targets.
pub fn train_gan_on_images(
    gan: &mut MasterPrintGan,
    targets: &[GrayImage],
    cfg: &GanTrainConfig,
) -> std::result::Result<Vec<GanLossRow>, TrainError> {
    if targets.is_empty() || cfg.batch == 0 {
        return Err(TrainError::Config("need at least one training image and a positive batch size".into()));
    }
    let size = gan.config.resolution;
    if let Some(t) = targets.iter().find(|t| t.dim() != (size, size)) {
        return Err(TrainError::Config(format!("target is {:?}, generator produces {size}x{size}", t.dim())));
    }
    let dev = gan.device().clone();
    let mut opt_g = Adam::new(gan.store.vars_with_prefix("g."), cfg.generator_opt)?;
    let mut opt_d = Adam::new(gan.store.vars_with_prefix("d."), cfg.discriminator_opt)?;
    let mut rng = rng_from(cfg.seed);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<&GrayImage> = (0..cfg.batch).map(|_| &targets[rng.random_range(0..targets.len())]).collect();
        let real = images_to_tensor(&batch, &dev)?;
        let z: Vec<f32> = (0..cfg.batch * gan.config.latent_dim).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect();
        let z = Tensor::from_vec(z, (cfg.batch, gan.config.latent_dim), &dev)?;

        let fake = gan.generator.forward(&z)?;
        let d_real = gan.discriminator.forward(&real)?;
        let d_fake = gan.discriminator.forward(&fake.detach())?;
        let loss_d = adversarial_loss(&d_real, &d_fake)?.loss_d;
        opt_d.step(&loss_d, step)?;

        let d_fake = gan.discriminator.forward(&fake)?;
        let loss_g = adversarial_loss(&d_real.detach(), &d_fake)?.loss_g;
        opt_g.step(&loss_g, step)?;

        let row = GanLossRow { step, loss_g: scalar(&loss_g)?, loss_d: scalar(&loss_d)? };
        if !row.loss_d.is_finite() || !row.loss_g.is_finite() {
            return Err(TrainError::Diverged(format!("non-finite GAN loss at step {step}")));
        }
        log.push(row);
        gan.step += 1;
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn latent_is_seeded() {
        assert_eq!(sample_identity_latent(3), sample_identity_latent(3));
        assert_ne!(sample_identity_latent(3), sample_identity_latent(4));
        assert_eq!(sample_identity_latent(3).as_slice().len(), LATENT_DIM);
    }

    #[test]
    fn generator_output_shape_and_range() {
        let gan = MasterPrintGan::new(GanConfig::small(32), 1).unwrap();
        let m = gan.generate(&sample_identity_latent(0)).unwrap();
        assert_eq!(m.image.dim(), (32, 32));
        assert!(m.image.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(m, gan.generate(&sample_identity_latent(0)).unwrap());
    }

    #[test]
    fn config_validation() {
        assert!(GanConfig::default().validate().is_ok());
        assert_eq!(blocks_for(256), Some(6));
        assert_eq!(blocks_for(100), None);
        let mut c = GanConfig::default();
        c.channels.pop();
        assert!(c.validate().is_err());
    }
}
