use std::io::Write;
use std::path::Path;
use std::process::Command;

use serde::{Deserialize, Serialize};

use super::extract::{extract_minutiae_with, ExtractConfig, Minutia, MinutiaKind};
use crate::binarize::{foreground_mask, ClassicalParams, RidgeBinarizer};
use crate::dataset::{DataError, Dataset};
use crate::image::{harden, GrayImage};

/// Row labels of the statistics table, in output order.
pub const STATS_ROWS: [&str; 6] = [
    "Total Minutiae Count",
    "Ridge Ending Minutiae Count",
    "Ridge Bifurcation Minutiae Count",
    "Verifinger Minutiae Quality",
    "Fingerprint Area (Megapixels)",
    NFIQ2_ROW,
];
pub const NFIQ2_ROW: &str = "Fingerprint Image Quality (NFIQ2)";
pub const PER_MP_ROW: &str = "Minutiae per Megapixel";

#[derive(Debug, thiserror::Error)]
pub enum StatsError {
    #[error("cannot compute statistics of an empty dataset")]
    Empty,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("minutiae extraction failed: {0}")]
    Extraction(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and population standard deviation; `(0, 0)` for no values.
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageStats {
    pub total: usize,
    pub endings: usize,
    pub bifurcations: usize,
    /// `None` when the image has no minutiae.
    pub mean_quality: Option<f64>,
    pub area_megapixels: f64,
    pub nfiq2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FingerprintStats {
    pub images: usize,
    pub total_count: MeanStd,
    pub ending_count: MeanStd,
    pub bifurcation_count: MeanStd,
    pub mean_quality: MeanStd,
    pub area_megapixels: MeanStd,
    /// Present only when every image got an NFIQ2 score.
    pub nfiq2: Option<MeanStd>,
    pub minutiae_per_megapixel: f64,
    /// Set when the mean foreground area is zero and the density is reported as 0.
    pub degenerate_area: bool,
}

#[derive(Debug, Clone, Default)]
pub struct StatsConfig {
    pub extract: ExtractConfig,
    pub segmentation: ClassicalParams,
    /// External NFIQ2 executable, invoked as `<bin> <image path>`; the last
    /// number on stdout is taken as the score.
    pub nfiq2_binary: Option<String>,
}

/// `mean_count / mean_area`, or `(0, true)` when the area is zero.
pub fn minutiae_per_megapixel(mean_count: f64, mean_area_mp: f64) -> (f64, bool) {
    if mean_area_mp > 0.0 {
        (mean_count / mean_area_mp, false)
    } else {
        (0.0, true)
    }
}

/// Binarizes, segments, and extracts minutiae from one grayscale image.
pub fn image_stats(
    gray: &GrayImage,
    binarizer: &dyn RidgeBinarizer,
    cfg: &StatsConfig,
) -> Result<(ImageStats, Vec<Minutia>), StatsError> {
    let mask = foreground_mask(gray, &cfg.segmentation);
    let ridges = harden(&binarizer.ridge_map(gray), 0.5);
    let ridges = ndarray::Zip::from(&ridges).and(&mask).map_collect(|&r, &m| if m { r } else { 0.0 });
    let (minutiae, _) = extract_minutiae_with(&ridges, &cfg.extract, Some(&mask))
        .map_err(|e| StatsError::Extraction(e.to_string()))?;
    let endings = minutiae.iter().filter(|m| m.kind == MinutiaKind::Ending).count();
    let bifurcations = minutiae.len() - endings;
    let mean_quality = (!minutiae.is_empty())
        .then(|| minutiae.iter().map(|m| m.quality).sum::<f64>() / minutiae.len() as f64);
    let area = mask.iter().filter(|&&m| m).count() as f64 / 1e6;
    Ok((
        ImageStats { total: minutiae.len(), endings, bifurcations, mean_quality, area_megapixels: area, nfiq2: None },
        minutiae,
    ))
}

pub fn aggregate_stats(per_image: &[ImageStats]) -> Result<FingerprintStats, StatsError> {
    if per_image.is_empty() {
        return Err(StatsError::Empty);
    }
    let col = |f: &dyn Fn(&ImageStats) -> f64| per_image.iter().map(f).collect::<Vec<_>>();
    let total_count = MeanStd::of(&col(&|s| s.total as f64));
    let area = MeanStd::of(&col(&|s| s.area_megapixels));
    let qualities: Vec<f64> = per_image.iter().filter_map(|s| s.mean_quality).collect();
    let nfiq: Option<Vec<f64>> = per_image.iter().map(|s| s.nfiq2).collect();
    let (per_mp, degenerate) = minutiae_per_megapixel(total_count.mean, area.mean);
    Ok(FingerprintStats {
        images: per_image.len(),
        total_count,
        ending_count: MeanStd::of(&col(&|s| s.endings as f64)),
        bifurcation_count: MeanStd::of(&col(&|s| s.bifurcations as f64)),
        mean_quality: MeanStd::of(&qualities),
        area_megapixels: area,
        nfiq2: nfiq.map(|v| MeanStd::of(&v)),
        minutiae_per_megapixel: per_mp,
        degenerate_area: degenerate,
    })
}

pub fn fingerprint_stats(dataset: &Dataset, binarizer: &dyn RidgeBinarizer) -> Result<FingerprintStats, StatsError> {
    fingerprint_stats_with(dataset, binarizer, &StatsConfig::default()).map(|(s, _)| s)
}

/// Per-image work runs in parallel; results are aggregated in record order.
pub fn fingerprint_stats_with(
    dataset: &Dataset,
    binarizer: &dyn RidgeBinarizer,
    cfg: &StatsConfig,
) -> Result<(FingerprintStats, Vec<ImageStats>), StatsError> {
    use rayon::prelude::*;
    if dataset.is_empty() {
        return Err(StatsError::Empty);
    }
    let per_image: Vec<ImageStats> = dataset
        .records()
        .par_iter()
        .map(|r| {
            let gray = dataset.load_image(r)?;
            let (mut s, _) = image_stats(&gray, binarizer, cfg)?;
            if let Some(bin) = &cfg.nfiq2_binary {
                s.nfiq2 = run_nfiq2(bin, &dataset.path_of(r));
            }
            Ok(s)
        })
        .collect::<Result<_, StatsError>>()?;
    Ok((aggregate_stats(&per_image)?, per_image))
}

fn run_nfiq2(bin: &str, image: &Path) -> Option<f64> {
    let out = Command::new(bin).arg(image).output().ok()?;
    if !out.status.success() {
        return None;
    }
    String::from_utf8_lossy(&out.stdout)
        .split(|c: char| !(c.is_ascii_digit() || c == '.' || c == '-'))
        .filter_map(|t| t.parse::<f64>().ok())
        .last()
}

/// Writes `metric,mean,std`; the NFIQ2 row reads `NA` without an external scorer.
pub fn write_stats_table(path: &Path, stats: &FingerprintStats) -> Result<(), StatsError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| StatsError::Io(e.into()))?;
    let fmt = |m: &MeanStd| [format!("{:.4}", m.mean), format!("{:.4}", m.std)];
    let rows: [(&str, Option<&MeanStd>); 6] = [
        (STATS_ROWS[0], Some(&stats.total_count)),
        (STATS_ROWS[1], Some(&stats.ending_count)),
        (STATS_ROWS[2], Some(&stats.bifurcation_count)),
        (STATS_ROWS[3], Some(&stats.mean_quality)),
        (STATS_ROWS[4], Some(&stats.area_megapixels)),
        (STATS_ROWS[5], stats.nfiq2.as_ref()),
    ];
    let to_io = |e: csv::Error| StatsError::Io(e.into());
    w.write_record(["metric", "mean", "std"]).map_err(to_io)?;
    for (name, v) in rows {
        match v {
            Some(m) => {
                let [a, b] = fmt(m);
                w.write_record([name, &a, &b]).map_err(to_io)?;
            }
            None => w.write_record([name, "NA", "NA"]).map_err(to_io)?,
        }
    }
    let per_mp = format!("{:.4}", stats.minutiae_per_megapixel);
    w.write_record([PER_MP_ROW, &per_mp, ""]).map_err(to_io)?;
    w.flush()?;
    Ok(())
}

/// `x,y,theta,kind,quality` with one row per minutia.
pub fn write_minutiae_csv(out: impl Write, minutiae: &[Minutia]) -> Result<(), StatsError> {
    let mut w = csv::Writer::from_writer(out);
    let to_io = |e: csv::Error| StatsError::Io(e.into());
    w.write_record(["x", "y", "theta", "kind", "quality"]).map_err(to_io)?;
    for m in minutiae {
        let kind = match m.kind {
            MinutiaKind::Ending => "ending",
            MinutiaKind::Bifurcation => "bifurcation",
        };
        w.write_record([m.x.to_string(), m.y.to_string(), format!("{:.6}", m.theta), kind.into(), format!("{:.3}", m.quality)])
            .map_err(to_io)?;
    }
    w.flush()?;
    Ok(())
}
