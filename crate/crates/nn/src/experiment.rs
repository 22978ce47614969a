//! Training-composition experiments: detectors trained on mixes of real and
//! synthetic data, scored as TDR at a fixed FDR on held-out evaluation sets.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use forge_core::dataset::{Dataset, Split};
use forge_core::image::GrayImage;
use forge_core::metrics::{tdr_at_fdr, DetectionScoreSet, MetricError, DEFAULT_FDR};
use forge_core::minutiae::Minutia;
use forge_core::pad::FusionConfig;
use forge_core::seed::{derive_named, rng_from};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{detect_minutiae, Branch, DetectorConfig, DetectorSample, DetectorTrainConfig, SpoofDetector};
use crate::params::ParamsError;
use crate::TrainError;

pub const RESULTS_HEADER: [&str; 5] = ["composition", "real_fraction", "eval_set", "tdr_at_fdr_0.2pct", "threshold"];
pub const DEFAULT_REAL_FRACTIONS: [f64; 5] = [0.0, 25.0, 50.0, 75.0, 100.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Composition {
    #[serde(rename = "synthetic_only")]
    SyntheticOnly,
    #[serde(rename = "synthetic+real_live")]
    SyntheticRealLive,
    #[serde(rename = "real_only")]
    RealOnly,
    #[serde(rename = "real+synthetic")]
    RealSynthetic,
}

impl Composition {
    pub const ALL: [Composition; 4] =
        [Composition::SyntheticOnly, Composition::SyntheticRealLive, Composition::RealOnly, Composition::RealSynthetic];

    pub fn name(self) -> &'static str {
        match self {
            Composition::SyntheticOnly => "synthetic_only",
            Composition::SyntheticRealLive => "synthetic+real_live",
            Composition::RealOnly => "real_only",
            Composition::RealSynthetic => "real+synthetic",
        }
    }

    fn uses_synthetic(self) -> bool {
        self != Composition::RealOnly
    }

    fn uses_real(self) -> bool {
        self != Composition::SyntheticOnly
    }
}

impl std::str::FromStr for Composition {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Composition::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown composition {s:?}"))
    }
}

impl std::fmt::Display for Composition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("provenance overlap: finger {0} is in both the real and the synthetic data")]
    ProvenanceOverlap(String),
    #[error("eval set {set}: finger {finger} also appears in training data")]
    EvalOverlap { set: String, finger: String },
    #[error("invalid experiment configuration: {0}")]
    Config(String),
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Params(#[from] ParamsError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub compositions: Vec<Composition>,
    /// Percent of the real training fingers included, each in `[0, 100]`.
    pub real_fractions: Vec<f64>,
    pub detector: DetectorConfig,
    /// Per-branch schedule; the seed is replaced per cell.
    pub train: DetectorTrainConfig,
    pub fusion: FusionConfig,
    pub fdr: f64,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            compositions: Composition::ALL.to_vec(),
            real_fractions: DEFAULT_REAL_FRACTIONS.to_vec(),
            detector: DetectorConfig::default(),
            train: DetectorTrainConfig::default(),
            fusion: FusionConfig::default(),
            fdr: DEFAULT_FDR,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        if self.compositions.is_empty() || self.real_fractions.is_empty() {
            return bad("need at least one composition and one real fraction".into());
        }
        if let Some(f) = self.real_fractions.iter().find(|f| !(0.0..=100.0).contains(*f)) {
            return bad(format!("real fraction {f} is outside [0, 100]"));
        }
        if !(0.0..=1.0).contains(&self.fdr) {
            return bad(format!("fdr {} is outside [0, 1]", self.fdr));
        }
        self.fusion.validate().map_err(|e| ExperimentError::Config(e.to_string()))
    }
}

pub struct EvalSet {
    pub name: String,
    pub dataset: Dataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub composition: Composition,
    pub real_fraction: f64,
    pub eval_set: String,
    pub tdr: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedCell {
    pub composition: Composition,
    pub real_fraction: f64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellTraining {
    pub composition: Composition,
    pub real_fraction: f64,
    pub real_fingers: usize,
    pub live_images: usize,
    pub spoof_images: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResults {
    pub eval_sets: Vec<String>,
    pub cells: Vec<CellResult>,
    pub skipped: Vec<SkippedCell>,
    pub training: Vec<CellTraining>,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> ExperimentError {
    ExperimentError::Io { path: path.display().to_string(), message: e.to_string() }
}

fn fmt_fraction(f: f64) -> String {
    if f.fract() == 0.0 {
        format!("{f:.0}")
    } else {
        format!("{f}")
    }
}

impl ExperimentResults {
    pub fn get(&self, composition: Composition, real_fraction: f64, eval_set: &str) -> Option<&CellResult> {
        self.cells
            .iter()
            .find(|c| c.composition == composition && c.real_fraction == real_fraction && c.eval_set == eval_set)
    }

    fn fractions(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.cells.iter().map(|c| c.real_fraction).chain(self.skipped.iter().map(|s| s.real_fraction)).collect();
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    }

    fn compositions(&self) -> Vec<Composition> {
        let set: BTreeSet<Composition> =
            self.cells.iter().map(|c| c.composition).chain(self.skipped.iter().map(|s| s.composition)).collect();
        set.into_iter().collect()
    }

    /// One row per composition at the largest real fraction, one TDR column per eval set.
    pub fn composition_table(&self) -> Vec<(Composition, Vec<Option<f64>>)> {
        let Some(&top) = self.fractions().last() else { return Vec::new() };
        self.compositions()
            .into_iter()
            .map(|c| (c, self.eval_sets.iter().map(|e| self.get(c, top, e).map(|r| r.tdr)).collect()))
            .collect()
    }

    pub fn write_results_csv(&self, path: &Path) -> Result<(), ExperimentError> {
        let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
        w.write_record(RESULTS_HEADER).map_err(|e| io_err(path, e))?;
        for c in &self.cells {
            w.write_record([
                c.composition.name().to_string(),
                fmt_fraction(c.real_fraction),
                c.eval_set.clone(),
                format!("{:.6}", c.tdr),
                format!("{:.6}", c.threshold),
            ])
            .map_err(|e| io_err(path, e))?;
        }
        w.flush().map_err(|e| io_err(path, e))
    }

    /// Missing cells read `NA`.
    pub fn write_composition_table(&self, path: &Path) -> Result<(), ExperimentError> {
        let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
        let header: Vec<String> = std::iter::once("composition".to_string()).chain(self.eval_sets.iter().cloned()).collect();
        w.write_record(&header).map_err(|e| io_err(path, e))?;
        for (c, tdrs) in self.composition_table() {
            let row: Vec<String> = std::iter::once(c.name().to_string())
                .chain(tdrs.iter().map(|t| t.map_or("NA".into(), |v| format!("{v:.6}"))))
                .collect();
            w.write_record(&row).map_err(|e| io_err(path, e))?;
        }
        w.flush().map_err(|e| io_err(path, e))
    }

    /// Long-format sweep for plotting; skipped cells carry their reason and no TDR.
    pub fn write_varying_percent(&self, path: &Path) -> Result<(), ExperimentError> {
        let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
        w.write_record(["composition", "real_fraction", "eval_set", "tdr", "note"]).map_err(|e| io_err(path, e))?;
        for comp in self.compositions() {
            for f in self.fractions() {
                if let Some(s) = self.skipped.iter().find(|s| s.composition == comp && s.real_fraction == f) {
                    for e in &self.eval_sets {
                        w.write_record([comp.name(), &fmt_fraction(f), e, "", &format!("skipped: {}", s.reason)])
                            .map_err(|e| io_err(path, e))?;
                    }
                    continue;
                }
                for e in &self.eval_sets {
                    if let Some(c) = self.get(comp, f, e) {
                        w.write_record([comp.name(), &fmt_fraction(f), e, &format!("{:.6}", c.tdr), ""])
                            .map_err(|e| io_err(path, e))?;
                    }
                }
            }
        }
        w.flush().map_err(|e| io_err(path, e))
    }

    pub fn write_all(&self, dir: &Path) -> Result<(), ExperimentError> {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        self.write_results_csv(&dir.join("results.csv"))?;
        self.write_composition_table(&dir.join("composition_table.csv"))?;
        self.write_varying_percent(&dir.join("varying_percent.csv"))?;
        let json = serde_json::to_string_pretty(self).map_err(|e| io_err(dir, e))?;
        let path = dir.join("experiment.json");
        let mut f = std::fs::File::create(&path).map_err(|e| io_err(&path, e))?;
        f.write_all(json.as_bytes()).map_err(|e| io_err(&path, e))
    }
}

struct Labeled {
    finger: String,
    sample: DetectorSample,
}

fn load_samples(dataset: &Dataset) -> Result<Vec<Labeled>, TrainError> {
    dataset
        .records()
        .par_iter()
        .map(|r| {
            let image = dataset.load_image(r)?;
            let minutiae = detect_minutiae(&image);
            Ok(Labeled {
                finger: r.finger_id.clone(),
                sample: DetectorSample { image, spoof: !r.is_live, minutiae, validation: false },
            })
        })
        .collect()
}

struct EvalData {
    name: String,
    items: Vec<(GrayImage, Vec<Minutia>, bool)>,
}

/// For each composition and real fraction, trains a fresh two-branch detector
/// and reports TDR at `cfg.fdr` on every eval set.
///
/// Real training data is the train split of `real` (all of it when the
/// manifest has no test split). A fraction keeps a prefix of one seeded
/// permutation of the real fingers, so larger fractions contain smaller ones.
/// Synthetic-only cells do not depend on the fraction and are trained once.
pub fn run_augmentation_experiment(
    real: &Dataset,
    synthetic: &Dataset,
    eval_sets: &[EvalSet],
    cfg: &ExperimentConfig,
) -> Result<ExperimentResults, ExperimentError> {
    cfg.validate()?;
    if eval_sets.is_empty() {
        return Err(ExperimentError::Config("no eval sets".into()));
    }
    let real_has_test = real.records().iter().any(|r| r.split == Split::Test);
    let real_train = if real_has_test { real.filter(|r| r.split == Split::Train) } else { real.clone() };
    let real_fingers: BTreeSet<String> = real_train.finger_ids().into_iter().collect();
    let syn_fingers: BTreeSet<String> = synthetic.finger_ids().into_iter().collect();
    if let Some(f) = real_fingers.intersection(&syn_fingers).next() {
        return Err(ExperimentError::ProvenanceOverlap(f.clone()));
    }
    for e in eval_sets {
        if let Some(f) = e.dataset.finger_ids().into_iter().find(|f| real_fingers.contains(f) || syn_fingers.contains(f)) {
            return Err(ExperimentError::EvalOverlap { set: e.name.clone(), finger: f });
        }
        if !e.dataset.has_live() || !e.dataset.has_spoof() {
            return Err(ExperimentError::Config(format!("eval set {} needs both live and spoof images", e.name)));
        }
    }

    let real_samples = load_samples(&real_train)?;
    let syn_samples = load_samples(synthetic)?;
    let evals: Vec<EvalData> = eval_sets
        .iter()
        .map(|e| {
            let items = load_samples(&e.dataset)?
                .into_iter()
                .map(|l| (l.sample.image, l.sample.minutiae, l.sample.spoof))
                .collect();
            Ok(EvalData { name: e.name.clone(), items })
        })
        .collect::<Result<_, TrainError>>()?;

    let mut order: Vec<String> = real_fingers.into_iter().collect();
    order.shuffle(&mut rng_from(derive_named(cfg.seed, "real-fraction", 0)));

    struct Cell {
        composition: Composition,
        fraction: f64,
        key: (Composition, usize),
    }
    let mut cells = Vec::new();
    for &c in &cfg.compositions {
        for &f in &cfg.real_fractions {
            let k = if c.uses_real() { (f / 100.0 * order.len() as f64).round() as usize } else { 0 };
            cells.push(Cell { composition: c, fraction: f, key: (c, k) });
        }
    }
    // identical training sets (same composition, same finger count) are trained once
    let unique: BTreeSet<(Composition, usize)> = cells.iter().map(|c| c.key).collect();
    let outcomes: BTreeMap<(Composition, usize), Result<(CellTraining, Vec<(f64, f64)>), String>> = unique
        .into_par_iter()
        .map(|(comp, k)| {
            let keep: BTreeSet<&str> = order[..k].iter().map(String::as_str).collect();
            let mut train: Vec<DetectorSample> = Vec::new();
            if comp.uses_real() {
                train.extend(
                    real_samples
                        .iter()
                        .filter(|l| keep.contains(l.finger.as_str()))
                        .filter(|l| comp != Composition::SyntheticRealLive || !l.sample.spoof)
                        .map(|l| l.sample.clone()),
                );
            }
            if comp.uses_synthetic() {
                train.extend(syn_samples.iter().map(|l| l.sample.clone()));
            }
            let spoofs = train.iter().filter(|s| s.spoof).count();
            let info = CellTraining {
                composition: comp,
                real_fraction: 0.0,
                real_fingers: k,
                live_images: train.len() - spoofs,
                spoof_images: spoofs,
            };
            let r = if train.is_empty() {
                Err("no training data".to_string())
            } else if spoofs == 0 || spoofs == train.len() {
                Err(format!("training data has a single class ({} live, {} spoof)", info.live_images, spoofs))
            } else {
                let seed = derive_named(cfg.seed, &format!("cell/{}", comp.name()), k as u64);
                train_and_score(&train, &evals, cfg, seed).map_err(|e| e.to_string())
            };
            ((comp, k), r.map(|s| (info, s)))
        })
        .collect();

    let mut out = ExperimentResults {
        eval_sets: evals.iter().map(|e| e.name.clone()).collect(),
        cells: Vec::new(),
        skipped: Vec::new(),
        training: Vec::new(),
    };
    for cell in cells {
        match &outcomes[&cell.key] {
            Ok((info, scores)) => {
                out.training.push(CellTraining { real_fraction: cell.fraction, ..info.clone() });
                for (e, &(threshold, tdr)) in evals.iter().zip(scores) {
                    out.cells.push(CellResult {
                        composition: cell.composition,
                        real_fraction: cell.fraction,
                        eval_set: e.name.clone(),
                        tdr,
                        threshold,
                    });
                }
            }
            Err(reason) => out.skipped.push(SkippedCell {
                composition: cell.composition,
                real_fraction: cell.fraction,
                reason: if cell.key.1 == 0 && cell.composition == Composition::RealOnly {
                    format!("no real training data at {}%", fmt_fraction(cell.fraction))
                } else {
                    reason.clone()
                },
            }),
        }
    }
    Ok(out)
}

/// `(threshold, tdr)` per eval set.
fn train_and_score(
    train: &[DetectorSample],
    evals: &[EvalData],
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<Vec<(f64, f64)>, ExperimentError> {
    let mut det = SpoofDetector::new(cfg.detector.clone(), seed)?;
    for (i, branch) in [Branch::Whole, Branch::Patch].into_iter().enumerate() {
        let tc = DetectorTrainConfig { seed: derive_named(seed, "branch", i as u64), ..cfg.train.clone() };
        crate::detector::train_detector(&mut det, train, branch, &tc)?;
    }
    evals
        .iter()
        .map(|e| {
            let mut scores = DetectionScoreSet { live_scores: Vec::new(), spoof_scores: Vec::new() };
            for (img, m, spoof) in &e.items {
                let s = det.spoof_score(&cfg.fusion, img, m)?;
                if *spoof {
                    scores.spoof_scores.push(s);
                } else {
                    scores.live_scores.push(s);
                }
            }
            Ok(tdr_at_fdr(&scores, cfg.fdr)?)
        })
        .collect()
}
