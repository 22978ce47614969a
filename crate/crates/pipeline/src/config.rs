//! TOML run configuration. Each stage reads its own section; relative paths
//! are resolved against the directory of the config file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use forge_core::dataset::{load_dataset, Dataset, Split, MANIFEST_FILE};
use forge_core::material::MaterialLabel;
use forge_core::matching::DEFAULT_IMPOSTER_CAP;
use forge_core::metrics::DEFAULT_FDR;
use forge_core::pad::FusionConfig;
use forge_core::warp::DEFAULT_SIGMA_C;
use forge_nn::detector::{DetectorConfig, DetectorTrainConfig};
use forge_nn::experiment::{Composition, ExperimentConfig, DEFAULT_REAL_FRACTIONS};
use forge_nn::optim::AdamConfig;
use serde::{Deserialize, Serialize};

use crate::error::{PipelineError, Result};

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub generation: Option<GenerationConfig>,
    pub report: Option<ReportConfig>,
    pub experiment: Option<ExperimentSection>,
}

impl PipelineConfig {
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: PipelineConfig = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        if let Some(g) = &mut cfg.generation {
            g.resolve(base);
        }
        if let Some(r) = &mut cfg.report {
            r.resolve(base);
        }
        if let Some(x) = &mut cfg.experiment {
            x.resolve(base);
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn generation(&self) -> Result<&GenerationConfig> {
        self.generation.as_ref().ok_or_else(|| PipelineError::Config("missing [generation] section".into()))
    }

    pub fn report(&self) -> Result<&ReportConfig> {
        self.report.as_ref().ok_or_else(|| PipelineError::Config("missing [report] section".into()))
    }

    pub fn experiment(&self) -> Result<&ExperimentSection> {
        self.experiment.as_ref().ok_or_else(|| PipelineError::Config("missing [experiment] section".into()))
    }
}

fn rebase(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

/// A dataset root with an optional manifest path and split filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRef {
    pub root: PathBuf,
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    #[serde(default)]
    pub split: Option<Split>,
}

impl DatasetRef {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into(), manifest: None, split: None }
    }

    fn resolve(&mut self, base: &Path) {
        rebase(base, &mut self.root);
        if let Some(m) = &mut self.manifest {
            rebase(base, m);
        }
    }

    pub fn load(&self) -> Result<Dataset> {
        let manifest = self.manifest.clone().unwrap_or_else(|| self.root.join(MANIFEST_FILE));
        let ds = load_dataset(&self.root, &manifest)?;
        Ok(match self.split {
            Some(s) => ds.filter(|r| r.split == s),
            None => ds,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointPaths {
    pub masterprint: PathBuf,
    /// Renderer checkpoint per material.
    #[serde(default)]
    pub renderers: BTreeMap<String, PathBuf>,
    /// Lineage file from the renderer schedule; consulted for materials not in `renderers`.
    #[serde(default)]
    pub lineage: Option<PathBuf>,
    /// Deformation basis; without one a basis is synthesized from the root seed.
    #[serde(default)]
    pub basis: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationConfig {
    pub n_fingers: usize,
    pub impressions_per_finger: usize,
    pub materials: Vec<MaterialLabel>,
    pub root_seed: u64,
    pub checkpoints: CheckpointPaths,
    pub output_root: PathBuf,
    #[serde(default = "default_sigma_c")]
    pub sigma_c: f64,
    #[serde(default = "default_prefix")]
    pub finger_prefix: String,
    /// Grid and rank of the synthesized basis.
    #[serde(default = "default_basis_grid")]
    pub basis_grid: usize,
    #[serde(default = "default_basis_t")]
    pub basis_t: usize,
}

fn default_sigma_c() -> f64 {
    DEFAULT_SIGMA_C
}

fn default_prefix() -> String {
    "syn".into()
}

fn default_basis_grid() -> usize {
    16
}

fn default_basis_t() -> usize {
    6
}

impl GenerationConfig {
    pub fn new(
        n_fingers: usize,
        impressions_per_finger: usize,
        materials: Vec<MaterialLabel>,
        root_seed: u64,
        checkpoints: CheckpointPaths,
        output_root: impl Into<PathBuf>,
    ) -> Self {
        Self {
            n_fingers,
            impressions_per_finger,
            materials,
            root_seed,
            checkpoints,
            output_root: output_root.into(),
            sigma_c: DEFAULT_SIGMA_C,
            finger_prefix: default_prefix(),
            basis_grid: default_basis_grid(),
            basis_t: default_basis_t(),
        }
    }

    fn resolve(&mut self, base: &Path) {
        rebase(base, &mut self.output_root);
        let c = &mut self.checkpoints;
        rebase(base, &mut c.masterprint);
        c.renderers.values_mut().for_each(|p| rebase(base, p));
        if let Some(p) = &mut c.lineage {
            rebase(base, p);
        }
        if let Some(p) = &mut c.basis {
            rebase(base, p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.n_fingers == 0 {
            return bad("n_fingers must be >= 1".into());
        }
        if self.impressions_per_finger == 0 {
            return bad("impressions_per_finger must be >= 1".into());
        }
        if self.materials.is_empty() {
            return bad("materials is empty".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        if let Some(m) = self.materials.iter().find(|m| !seen.insert(m.as_str())) {
            return bad(format!("material {m} listed twice"));
        }
        if !(self.sigma_c.is_finite() && self.sigma_c >= 0.0) {
            return bad(format!("sigma_c must be finite and non-negative, got {}", self.sigma_c));
        }
        if self.finger_prefix.is_empty() || self.finger_prefix.contains(['/', '\\']) {
            return bad("finger_prefix must be a non-empty path-safe string".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportConfig {
    pub real: DatasetRef,
    pub synthetic: DatasetRef,
    pub out_dir: PathBuf,
    /// Learned embedder checkpoint; the seeded projection embedder otherwise.
    #[serde(default)]
    pub embedder: Option<PathBuf>,
    /// Learned binarizer checkpoint for the statistics; classical otherwise.
    #[serde(default)]
    pub binarizer: Option<PathBuf>,
    #[serde(default = "default_far_targets")]
    pub far_targets: Vec<f64>,
    /// Match threshold for the leakage audit; defaults to the real live-live
    /// threshold at the smallest FAR target.
    #[serde(default)]
    pub leakage_threshold: Option<f64>,
    #[serde(default = "default_imposter_cap")]
    pub imposter_cap: usize,
    /// Spoof materials that must get a live-spoof pairing; all synthetic spoof materials by default.
    #[serde(default)]
    pub materials: Option<Vec<MaterialLabel>>,
    #[serde(default)]
    pub seed: u64,
}

fn default_far_targets() -> Vec<f64> {
    vec![1e-4, 1e-3, 1e-2]
}

fn default_imposter_cap() -> usize {
    DEFAULT_IMPOSTER_CAP
}

impl ReportConfig {
    pub fn new(real: DatasetRef, synthetic: DatasetRef, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            real,
            synthetic,
            out_dir: out_dir.into(),
            embedder: None,
            binarizer: None,
            far_targets: default_far_targets(),
            leakage_threshold: None,
            imposter_cap: DEFAULT_IMPOSTER_CAP,
            materials: None,
            seed: 0,
        }
    }

    fn resolve(&mut self, base: &Path) {
        self.real.resolve(base);
        self.synthetic.resolve(base);
        rebase(base, &mut self.out_dir);
        for p in [&mut self.embedder, &mut self.binarizer].into_iter().flatten() {
            rebase(base, p);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSetRef {
    pub name: String,
    pub root: PathBuf,
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    #[serde(default)]
    pub split: Option<Split>,
}

impl EvalSetRef {
    pub fn data(&self) -> DatasetRef {
        DatasetRef { root: self.root.clone(), manifest: self.manifest.clone(), split: self.split }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub real: DatasetRef,
    pub synthetic: DatasetRef,
    pub eval: Vec<EvalSetRef>,
    pub out_dir: PathBuf,
    #[serde(default = "all_compositions")]
    pub compositions: Vec<Composition>,
    #[serde(default = "default_fractions")]
    pub real_fractions: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
    /// Steps per branch per cell.
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_fdr")]
    pub fdr: f64,
    #[serde(default)]
    pub fusion: Option<FusionConfig>,
    #[serde(default)]
    pub detector: Option<DetectorConfig>,
}

fn all_compositions() -> Vec<Composition> {
    Composition::ALL.to_vec()
}

fn default_fractions() -> Vec<f64> {
    DEFAULT_REAL_FRACTIONS.to_vec()
}

fn default_steps() -> usize {
    DetectorTrainConfig::default().steps
}

fn default_batch() -> usize {
    DetectorTrainConfig::default().batch
}

fn default_lr() -> f64 {
    DetectorTrainConfig::default().opt.lr
}

fn default_fdr() -> f64 {
    DEFAULT_FDR
}

impl ExperimentSection {
    fn resolve(&mut self, base: &Path) {
        self.real.resolve(base);
        self.synthetic.resolve(base);
        for e in &mut self.eval {
            rebase(base, &mut e.root);
            if let Some(m) = &mut e.manifest {
                rebase(base, m);
            }
        }
        rebase(base, &mut self.out_dir);
    }

    pub fn experiment_config(&self) -> ExperimentConfig {
        let d = DetectorTrainConfig::default();
        ExperimentConfig {
            compositions: self.compositions.clone(),
            real_fractions: self.real_fractions.clone(),
            detector: self.detector.clone().unwrap_or_default(),
            train: DetectorTrainConfig {
                steps: self.steps,
                batch: self.batch,
                seed: self.seed,
                opt: AdamConfig { lr: self.lr, ..d.opt },
                validation_fraction: 0.0,
            },
            fusion: self.fusion.unwrap_or_default(),
            fdr: self.fdr,
            seed: self.seed,
        }
    }
}
