//! The evaluation bundle: minutiae statistics, genuine/imposter score
//! distributions with TAR@FAR, and the synthetic-vs-training leakage audit.
//!
//! Every step records its own status. A failed step leaves a header-only CSV
//! and an error string in `summary.json`; the other steps still run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use forge_core::binarize::{ClassicalBinarizer, RidgeBinarizer};
use forge_core::dataset::Dataset;
use forge_core::material::MaterialLabel;
use forge_core::matching::{leakage_check, score_distributions, Embedder, LeakageReport, Pairing, ProjectionEmbedder, ScoreDistribution};
use forge_core::metrics::tar_at_far;
use forge_core::minutiae::{fingerprint_stats, FingerprintStats, MeanStd, NFIQ2_ROW, PER_MP_ROW, STATS_ROWS};
use forge_nn::binarizer::LearnedBinarizer;
use forge_nn::embedder::LearnedEmbedder;
use serde::{Deserialize, Serialize};

use crate::config::ReportConfig;
use crate::error::{PipelineError, Result};

pub const STATS_FILE: &str = "fp_stats.csv";
pub const SCORES_FILE: &str = "match_scores.csv";
pub const TAR_FILE: &str = "tar_at_far.csv";
pub const LEAKAGE_FILE: &str = "leakage.csv";
pub const ARTIFACTS: [&str; 4] = [STATS_FILE, SCORES_FILE, TAR_FILE, LEAKAGE_FILE];
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepStatus {
    pub step: String,
    pub ok: bool,
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub images: usize,
    pub fingers: usize,
    pub materials: Vec<MaterialLabel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairingSummary {
    pub dataset: String,
    pub pairing: String,
    pub genuine: usize,
    pub imposter: usize,
    pub imposter_available: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TarRow {
    pub dataset: String,
    pub pairing: String,
    pub far: f64,
    pub threshold: f64,
    pub tar: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageSummary {
    pub threshold: f64,
    pub total_comparisons: u64,
    pub flagged_pairs: usize,
    pub flagged_fingers: usize,
    pub max_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub seed: u64,
    pub embedder: String,
    pub binarizer: String,
    pub datasets: BTreeMap<String, DatasetSummary>,
    pub steps: Vec<StepStatus>,
    pub stats: BTreeMap<String, FingerprintStats>,
    pub pairings: Vec<PairingSummary>,
    pub tar_at_far: Vec<TarRow>,
    pub leakage: Option<LeakageSummary>,
    pub artifacts: Vec<String>,
}

impl ReportSummary {
    pub fn step(&self, name: &str) -> Option<&StepStatus> {
        self.steps.iter().find(|s| s.step == name)
    }
}

pub struct ReportBundle {
    pub dir: PathBuf,
    pub summary: ReportSummary,
}

impl ReportBundle {
    pub fn artifact_paths(&self) -> Vec<PathBuf> {
        ARTIFACTS.iter().map(|a| self.dir.join(a)).collect()
    }
}

const REAL: &str = "real";
const SYNTHETIC: &str = "synthetic";

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| PipelineError::io(path, e.into()))
}

fn csv_io(path: &Path) -> impl Fn(csv::Error) -> PipelineError + '_ {
    move |e| PipelineError::io(path, e.into())
}

fn f4(v: f64) -> String {
    format!("{v:.4}")
}

/// Runs every step and writes the four CSVs plus `summary.json` into `out_dir`.
/// Only failures to write the bundle itself are returned as errors.
pub fn replicate_eval_protocol(cfg: &ReportConfig) -> Result<ReportBundle> {
    let dir = cfg.out_dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| PipelineError::io(&dir, e))?;

    let data: Vec<(&str, std::result::Result<Dataset, String>)> = vec![
        (REAL, cfg.real.load().map_err(|e| format!("loading real data: {e}"))),
        (SYNTHETIC, cfg.synthetic.load().map_err(|e| format!("loading synthetic data: {e}"))),
    ];
    let (embedder, embedder_name): (std::result::Result<Box<dyn Embedder>, String>, String) = match &cfg.embedder {
        Some(p) => (
            LearnedEmbedder::load(p).map(|e| Box::new(e) as Box<dyn Embedder>).map_err(|e| e.to_string()),
            format!("learned:{}", p.file_name().map_or_else(String::new, |f| f.to_string_lossy().into_owned())),
        ),
        None => (Ok(Box::new(ProjectionEmbedder::new(cfg.seed))), format!("projection:{}", cfg.seed)),
    };
    let (binarizer, binarizer_name): (std::result::Result<Box<dyn RidgeBinarizer>, String>, String) = match &cfg.binarizer {
        Some(p) => (
            LearnedBinarizer::load(p).map(|b| Box::new(b) as Box<dyn RidgeBinarizer>).map_err(|e| e.to_string()),
            format!("learned:{}", p.file_name().map_or_else(String::new, |f| f.to_string_lossy().into_owned())),
        ),
        None => (Ok(Box::new(ClassicalBinarizer::default())), "classical".into()),
    };

    let mut summary = ReportSummary {
        seed: cfg.seed,
        embedder: embedder_name,
        binarizer: binarizer_name,
        datasets: BTreeMap::new(),
        steps: Vec::new(),
        stats: BTreeMap::new(),
        pairings: Vec::new(),
        tar_at_far: Vec::new(),
        leakage: None,
        artifacts: ARTIFACTS.iter().map(|s| s.to_string()).collect(),
    };
    for (name, d) in &data {
        if let Ok(d) = d {
            summary.datasets.insert(
                name.to_string(),
                DatasetSummary { images: d.len(), fingers: d.finger_ids().len(), materials: d.materials() },
            );
        }
    }

    // statistics
    let mut errors = Vec::new();
    match &binarizer {
        Ok(b) => {
            for (name, d) in &data {
                match d {
                    Ok(d) => match fingerprint_stats(d, b.as_ref()) {
                        Ok(s) => {
                            summary.stats.insert(name.to_string(), s);
                        }
                        Err(e) => errors.push(format!("{name}: {e}")),
                    },
                    Err(e) => errors.push(e.clone()),
                }
            }
        }
        Err(e) => errors.push(format!("binarizer: {e}")),
    }
    write_stats(&dir.join(STATS_FILE), &summary.stats)?;
    summary.steps.push(StepStatus { step: "stats".into(), ok: errors.is_empty(), errors });

    // score distributions
    let mut errors = Vec::new();
    let mut dists: Vec<(String, ScoreDistribution)> = Vec::new();
    match &embedder {
        Ok(emb) => {
            for (name, d) in &data {
                let d = match d {
                    Ok(d) => d,
                    Err(e) => {
                        errors.push(e.clone());
                        continue;
                    }
                };
                let spoofs: Vec<MaterialLabel> = match &cfg.materials {
                    Some(m) => m.iter().filter(|m| !m.is_live()).cloned().collect(),
                    None => data_spoof_materials(&data),
                };
                let pairings =
                    std::iter::once(Pairing::LiveLive).chain(spoofs.into_iter().map(|m| Pairing::LiveSpoof(Some(m))));
                for p in pairings {
                    match score_distributions(d, emb.as_ref(), &p, cfg.imposter_cap, cfg.seed) {
                        Ok(s) => {
                            summary.pairings.push(PairingSummary {
                                dataset: name.to_string(),
                                pairing: s.pairing.clone(),
                                genuine: s.scores.genuine().len(),
                                imposter: s.scores.imposter().len(),
                                imposter_available: s.pairs.imposter_available,
                                error: None,
                            });
                            dists.push((name.to_string(), s));
                        }
                        Err(e) => {
                            errors.push(format!("{name}: {e}"));
                            summary.pairings.push(PairingSummary {
                                dataset: name.to_string(),
                                pairing: p.name(),
                                genuine: 0,
                                imposter: 0,
                                imposter_available: 0,
                                error: Some(e.to_string()),
                            });
                        }
                    }
                }
            }
        }
        Err(e) => errors.push(format!("embedder: {e}")),
    }
    write_scores(&dir.join(SCORES_FILE), &dists)?;
    summary.steps.push(StepStatus { step: "match".into(), ok: errors.is_empty(), errors });

    // TAR@FAR
    let mut errors = Vec::new();
    for (name, d) in &dists {
        match tar_at_far(&d.scores, &cfg.far_targets) {
            Ok(points) => summary.tar_at_far.extend(points.into_iter().map(|p| TarRow {
                dataset: name.clone(),
                pairing: d.pairing.clone(),
                far: p.target,
                threshold: p.threshold,
                tar: p.rate,
            })),
            Err(e) => errors.push(format!("{name} {}: {e}", d.pairing)),
        }
    }
    if dists.is_empty() {
        errors.push("no score distributions to evaluate".into());
    }
    write_tar(&dir.join(TAR_FILE), &summary.tar_at_far)?;
    summary.steps.push(StepStatus { step: "tar_at_far".into(), ok: errors.is_empty(), errors });

    // leakage
    let mut errors = Vec::new();
    let threshold = cfg.leakage_threshold.or_else(|| {
        let min_far = cfg.far_targets.iter().copied().min_by(f64::total_cmp)?;
        summary
            .tar_at_far
            .iter()
            .find(|r| r.dataset == REAL && r.pairing == Pairing::LiveLive.name() && r.far == min_far)
            .map(|r| r.threshold)
    });
    let mut report: Option<LeakageReport> = None;
    match (&data[0].1, &data[1].1, &embedder, threshold) {
        (Ok(real), Ok(syn), Ok(emb), Some(t)) => match leakage_check(syn, real, emb.as_ref(), t) {
            Ok(r) => report = Some(r),
            Err(e) => errors.push(e.to_string()),
        },
        (_, _, _, None) => errors.push("no leakage threshold: none configured and no real live-live TAR@FAR".into()),
        _ => errors.push("inputs unavailable (see earlier steps)".into()),
    }
    write_leakage(&dir.join(LEAKAGE_FILE), report.as_ref())?;
    summary.leakage = report.as_ref().map(|r| LeakageSummary {
        threshold: r.threshold,
        total_comparisons: r.total_comparisons,
        flagged_pairs: r.pairs.len(),
        flagged_fingers: r.flagged_fingers,
        max_score: r.max_score,
    });
    summary.steps.push(StepStatus { step: "leakage".into(), ok: errors.is_empty(), errors });

    let path = dir.join(SUMMARY_FILE);
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    std::fs::write(&path, json).map_err(|e| PipelineError::io(&path, e))?;
    Ok(ReportBundle { dir, summary })
}

fn data_spoof_materials(data: &[(&str, std::result::Result<Dataset, String>)]) -> Vec<MaterialLabel> {
    let synthetic = data.iter().find(|(n, _)| *n == SYNTHETIC).and_then(|(_, d)| d.as_ref().ok());
    synthetic.map_or_else(Vec::new, |d| d.materials().into_iter().filter(|m| !m.is_live()).collect())
}

fn write_stats(path: &Path, stats: &BTreeMap<String, FingerprintStats>) -> Result<()> {
    let mut w = csv_writer(path)?;
    let io = csv_io(path);
    w.write_record(["dataset", "metric", "mean", "std"]).map_err(&io)?;
    for (name, s) in stats {
        let rows: [(&str, Option<&MeanStd>); 6] = [
            (STATS_ROWS[0], Some(&s.total_count)),
            (STATS_ROWS[1], Some(&s.ending_count)),
            (STATS_ROWS[2], Some(&s.bifurcation_count)),
            (STATS_ROWS[3], Some(&s.mean_quality)),
            (STATS_ROWS[4], Some(&s.area_megapixels)),
            (NFIQ2_ROW, s.nfiq2.as_ref()),
        ];
        for (metric, v) in rows {
            let (m, sd) = v.map_or(("NA".into(), "NA".into()), |v| (f4(v.mean), f4(v.std)));
            w.write_record([name.as_str(), metric, &m, &sd]).map_err(&io)?;
        }
        w.write_record([name.as_str(), PER_MP_ROW, &f4(s.minutiae_per_megapixel), ""]).map_err(&io)?;
    }
    w.flush().map_err(|e| PipelineError::io(path, e))
}

fn write_scores(path: &Path, dists: &[(String, ScoreDistribution)]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let io = csv_io(path);
    w.write_record(["dataset", "pairing", "label", "score"]).map_err(&io)?;
    for (name, d) in dists {
        for (label, scores) in [("genuine", d.scores.genuine()), ("imposter", d.scores.imposter())] {
            for s in scores {
                w.write_record([name.as_str(), &d.pairing, label, &format!("{s:.6}")]).map_err(&io)?;
            }
        }
    }
    w.flush().map_err(|e| PipelineError::io(path, e))
}

fn write_tar(path: &Path, rows: &[TarRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let io = csv_io(path);
    w.write_record(["dataset", "pairing", "far", "threshold", "tar"]).map_err(&io)?;
    for r in rows {
        w.write_record([r.dataset.clone(), r.pairing.clone(), format!("{}", r.far), format!("{:.6}", r.threshold), format!("{:.6}", r.tar)])
            .map_err(&io)?;
    }
    w.flush().map_err(|e| PipelineError::io(path, e))
}

fn write_leakage(path: &Path, report: Option<&LeakageReport>) -> Result<()> {
    let mut w = csv_writer(path)?;
    let io = csv_io(path);
    w.write_record(["synthetic", "training", "score"]).map_err(&io)?;
    for p in report.map_or(&[][..], |r| &r.pairs) {
        w.write_record([p.synthetic.as_str(), p.training.as_str(), &format!("{:.6}", p.score)]).map_err(&io)?;
    }
    w.flush().map_err(|e| PipelineError::io(path, e))
}
