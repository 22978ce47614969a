//! Dataset synthesis: one master print per finger, one warp per impression,
//! one texture render per material.
//!
//! Seed splitting, all through `derive_seed(root_seed, key)`:
//! - identity latent: `(Identity, finger, 0, "")`
//! - pose and distortion: `(Warp, finger, impression, "")`
//! - texture latent: `(Texture, finger, impression, material)`
//!
//! All materials of an impression are rendered from the same warped binary,
//! which is also written under `warped/`. Existing outputs that decode at the
//! expected size are kept, so an interrupted run can simply be repeated.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use forge_core::dataset::{write_manifest, Dataset, ImpressionRecord, Split, DEFAULT_DPI, MANIFEST_FILE};
use forge_core::image::{harden, partial_path, read_gray, resize_bilinear, write_gray_atomic, GrayImage};
use forge_core::material::MaterialLabel;
use forge_core::seed::{derive_named, derive_seed, rng_from, SeedKey, Stage};
use forge_core::warp::{
    apply_warp, compose_distortion_field, sample_pose_and_coeffs, synthesize_basis, DeformationBasis,
};
use forge_nn::gan::{sample_identity_latent, MasterPrintGan};
use forge_nn::renderer::{sample_texture_latent, Lineage, Renderer};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::GenerationConfig;
use crate::error::{PipelineError, Result};

pub const WARPED_DIR: &str = "warped";
pub const GENERATION_LOG: &str = "generation.json";

/// Loaded checkpoints for one generation run.
pub struct Stages {
    pub gan: MasterPrintGan,
    pub renderers: BTreeMap<MaterialLabel, Renderer>,
    pub basis: DeformationBasis,
}

fn require_file(what: &str, path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(PipelineError::Config(format!("missing {what} checkpoint {}", path.display())))
    }
}

impl Stages {
    /// Every configured material needs a renderer, from the explicit map or the lineage file.
    pub fn load(cfg: &GenerationConfig) -> Result<Self> {
        cfg.validate()?;
        let c = &cfg.checkpoints;
        require_file("masterprint", &c.masterprint)?;
        let lineage = match &c.lineage {
            Some(p) => {
                require_file("lineage", p)?;
                let l = Lineage::load(p).map_err(|e| PipelineError::io(p, e))?;
                l.validate()?;
                Some((p.parent().unwrap_or(Path::new(".")).to_path_buf(), l))
            }
            None => None,
        };
        let mut renderers = BTreeMap::new();
        for m in &cfg.materials {
            let path = match (c.renderers.get(m.as_str()), &lineage) {
                (Some(p), _) => p.clone(),
                (None, Some((dir, l))) => match l.get(m.as_str()) {
                    Some(e) if e.path.is_relative() => dir.join(&e.path),
                    Some(e) => e.path.clone(),
                    None => return Err(PipelineError::Config(format!("no renderer checkpoint for material {m}"))),
                },
                (None, None) => return Err(PipelineError::Config(format!("no renderer checkpoint for material {m}"))),
            };
            require_file(&format!("renderer ({m})"), &path)?;
            let r = Renderer::load(&path)?;
            if r.material != m.as_str() {
                return Err(PipelineError::Config(format!(
                    "renderer {} was trained for {}, configured for {m}",
                    path.display(),
                    r.material
                )));
            }
            renderers.insert(m.clone(), r);
        }
        let sizes: std::collections::BTreeSet<usize> = renderers.values().map(|r| r.config.in_size).collect();
        if sizes.len() > 1 {
            return Err(PipelineError::Config(format!("renderers disagree on input size: {sizes:?}")));
        }
        let basis = match &c.basis {
            Some(p) => {
                require_file("basis", p)?;
                DeformationBasis::load(p)?
            }
            None => synthesize_basis(cfg.basis_grid, cfg.basis_grid, cfg.basis_t, derive_named(cfg.root_seed, "basis", 0))?,
        };
        Ok(Self { gan: MasterPrintGan::load(&c.masterprint)?, renderers, basis })
    }

    fn in_size(&self) -> usize {
        self.renderers.values().next().map_or(0, |r| r.config.in_size)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderLog {
    pub material: MaterialLabel,
    pub image_path: PathBuf,
    pub texture_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpressionLog {
    pub finger_id: String,
    pub impression_id: u32,
    pub warp_seed: u64,
    pub rotation_deg: f64,
    pub tx: f64,
    pub ty: f64,
    pub coefficients: Vec<f64>,
    /// Display-polarity binary that every render of this impression consumed.
    pub warped_path: PathBuf,
    pub renders: Vec<RenderLog>,
}

/// Written as `generation.json`; contains no absolute paths, so two runs with
/// the same config produce identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationLog {
    pub root_seed: u64,
    pub n_fingers: usize,
    pub impressions_per_finger: usize,
    pub materials: Vec<MaterialLabel>,
    pub sigma_c: f64,
    pub masterprint_digest: String,
    pub renderer_ids: BTreeMap<String, String>,
    pub identity_seeds: Vec<u64>,
    pub impressions: Vec<ImpressionLog>,
}

pub struct Generated {
    pub dataset: Dataset,
    pub log: GenerationLog,
    /// Images rendered in this run; the rest were already on disk.
    pub rendered: usize,
    pub reused: usize,
}

pub fn finger_id(prefix: &str, finger: usize) -> String {
    format!("{prefix}{finger:05}")
}

pub fn identity_seed(root: u64, finger: usize) -> u64 {
    derive_seed(root, SeedKey { stage: Stage::Identity, finger: finger as u64, impression: 0, material: "" })
}

pub fn warp_seed(root: u64, finger: usize, impression: usize) -> u64 {
    derive_seed(root, SeedKey { stage: Stage::Warp, finger: finger as u64, impression: impression as u64, material: "" })
}

pub fn texture_seed(root: u64, finger: usize, impression: usize, material: &str) -> u64 {
    derive_seed(root, SeedKey { stage: Stage::Texture, finger: finger as u64, impression: impression as u64, material })
}

/// Loads the checkpoints and generates `n_fingers * impressions * materials` images.
pub fn generate_dataset(cfg: &GenerationConfig) -> Result<Dataset> {
    let stages = Stages::load(cfg)?;
    Ok(generate_with(cfg, &stages)?.dataset)
}

/// Also drops a temporary file left behind by an interrupted write.
fn is_complete(path: &Path, size: (usize, usize)) -> bool {
    let partial = partial_path(path);
    if partial.exists() {
        let _ = std::fs::remove_file(partial);
    }
    path.is_file() && read_gray(path).is_ok_and(|img| img.dim() == size)
}

/// Warped display-polarity binary for one impression, at the renderer input size.
pub fn warped_binary(
    master: &GrayImage,
    threshold: f32,
    stages: &Stages,
    cfg: &GenerationConfig,
    finger: usize,
    impression: usize,
) -> Result<(GrayImage, ImpressionLog)> {
    let s = stages.in_size();
    let seed = warp_seed(cfg.root_seed, finger, impression);
    let (pose, coeffs) = sample_pose_and_coeffs(&mut rng_from(seed), &stages.basis, cfg.sigma_c);
    let distortion = compose_distortion_field(&stages.basis, &coeffs, s, s)?;
    let base = if master.dim() == (s, s) { master.clone() } else { resize_bilinear(master, s, s) };
    let warped = harden(&apply_warp(&base, &pose, &distortion)?, threshold);
    let fid = finger_id(&cfg.finger_prefix, finger);
    let log = ImpressionLog {
        finger_id: fid.clone(),
        impression_id: impression as u32,
        warp_seed: seed,
        rotation_deg: pose.rotation,
        tx: pose.tx,
        ty: pose.ty,
        coefficients: coeffs,
        warped_path: PathBuf::from(WARPED_DIR).join(format!("{fid}_{impression}.png")),
        renders: Vec::new(),
    };
    Ok((warped, log))
}

struct FingerOutput {
    records: Vec<ImpressionRecord>,
    logs: Vec<ImpressionLog>,
    rendered: usize,
    reused: usize,
}

fn generate_finger(cfg: &GenerationConfig, stages: &Stages, finger: usize) -> Result<FingerOutput> {
    let root = &cfg.output_root;
    let master = stages.gan.generate(&sample_identity_latent(identity_seed(cfg.root_seed, finger)))?;
    let fid = finger_id(&cfg.finger_prefix, finger);
    let mut out = FingerOutput { records: Vec::new(), logs: Vec::new(), rendered: 0, reused: 0 };
    for i in 0..cfg.impressions_per_finger {
        let (warped, mut log) = warped_binary(&master.image, master.threshold, stages, cfg, finger, i)?;
        let wpath = root.join(&log.warped_path);
        if !is_complete(&wpath, warped.dim()) {
            write_gray_atomic(&wpath, &warped)?;
        }
        for m in &cfg.materials {
            let renderer = &stages.renderers[m];
            let out_size = renderer.config.out_size;
            let rel = PathBuf::from(m.as_str()).join(format!("{fid}_{i}.png"));
            let path = root.join(&rel);
            let tseed = texture_seed(cfg.root_seed, finger, i, m.as_str());
            if is_complete(&path, (out_size, out_size)) {
                out.reused += 1;
            } else {
                let z = sample_texture_latent(tseed, renderer.config.texture_dim);
                write_gray_atomic(&path, &renderer.render_texture(&warped, &z)?)?;
                out.rendered += 1;
            }
            out.records.push(ImpressionRecord {
                finger_id: fid.clone(),
                impression_id: i as u32,
                material: m.clone(),
                is_live: m.is_live(),
                split: Split::Train,
                image_path: rel.clone(),
                width: out_size as u32,
                height: out_size as u32,
                dpi: DEFAULT_DPI,
            });
            log.renders.push(RenderLog { material: m.clone(), image_path: rel, texture_seed: tseed });
        }
        out.logs.push(log);
    }
    Ok(out)
}

/// Fingers run in parallel; outputs are merged in finger order.
pub fn generate_with(cfg: &GenerationConfig, stages: &Stages) -> Result<Generated> {
    cfg.validate()?;
    let root = &cfg.output_root;
    std::fs::create_dir_all(root).map_err(|e| PipelineError::io(root, e))?;
    let parts: Vec<FingerOutput> =
        (0..cfg.n_fingers).into_par_iter().map(|f| generate_finger(cfg, stages, f)).collect::<Result<_>>()?;
    let mut records = Vec::new();
    let mut impressions = Vec::new();
    let (mut rendered, mut reused) = (0, 0);
    for p in parts {
        records.extend(p.records);
        impressions.extend(p.logs);
        rendered += p.rendered;
        reused += p.reused;
    }
    write_manifest(&root.join(MANIFEST_FILE), &records)?;
    let log = GenerationLog {
        root_seed: cfg.root_seed,
        n_fingers: cfg.n_fingers,
        impressions_per_finger: cfg.impressions_per_finger,
        materials: cfg.materials.clone(),
        sigma_c: cfg.sigma_c,
        masterprint_digest: stages.gan.digest()?,
        renderer_ids: stages
            .renderers
            .iter()
            .map(|(m, r)| Ok((m.to_string(), r.id()?)))
            .collect::<Result<_>>()?,
        identity_seeds: (0..cfg.n_fingers).map(|f| identity_seed(cfg.root_seed, f)).collect(),
        impressions,
    };
    let json = serde_json::to_string_pretty(&log).expect("log serializes");
    let log_path = root.join(GENERATION_LOG);
    std::fs::write(&log_path, json).map_err(|e| PipelineError::io(&log_path, e))?;
    Ok(Generated { dataset: Dataset::new(root, records)?, log, rendered, reused })
}
