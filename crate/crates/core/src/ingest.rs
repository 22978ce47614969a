//! Adapters that map an on-disk directory convention to manifest records.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use regex::Regex;
use serde::Deserialize;

use crate::dataset::{DataError, Dataset, ImpressionRecord, Split, DEFAULT_DPI};
use crate::image;
use crate::material::MaterialLabel;

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "bmp", "tif", "tiff"];

/// Candidate row before impression ids are assigned.
#[derive(Debug, Clone)]
pub struct RawEntry {
    pub rel_path: PathBuf,
    pub finger_id: String,
    pub material: MaterialLabel,
    pub split: Split,
    pub impression_id: Option<u32>,
}

pub trait LayoutAdapter {
    /// Interprets one image path relative to the root; `None` skips the file.
    fn classify(&self, rel_path: &Path) -> Result<Option<RawEntry>, DataError>;
}

/// Walks `root`, classifies every image with `adapter`, assigns missing
/// impression ids per `(finger, material)` in path order, and probes sizes.
pub fn ingest(root: &Path, adapter: &dyn LayoutAdapter) -> Result<Dataset, DataError> {
    let mut files = Vec::new();
    collect_images(root, root, &mut files)?;
    files.sort();
    let mut entries = Vec::new();
    for rel in files {
        if let Some(e) = adapter.classify(&rel)? {
            entries.push(e);
        }
    }
    let mut counters: BTreeMap<(String, MaterialLabel), u32> = BTreeMap::new();
    let mut records = Vec::with_capacity(entries.len());
    for e in entries {
        let counter = counters.entry((e.finger_id.clone(), e.material.clone())).or_insert(0);
        let impression_id = e.impression_id.unwrap_or(*counter);
        *counter = (*counter).max(impression_id + 1);
        let abs = root.join(&e.rel_path);
        let (width, height) = image::probe_gray(&abs).map_err(|source| DataError::BadImage {
            record: e.rel_path.display().to_string(),
            source,
        })?;
        records.push(ImpressionRecord {
            finger_id: e.finger_id,
            impression_id,
            is_live: e.material.is_live(),
            material: e.material,
            split: e.split,
            image_path: e.rel_path,
            width,
            height,
            dpi: DEFAULT_DPI,
        });
    }
    Dataset::new(root, records)
}

fn collect_images(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), DataError> {
    let rd = std::fs::read_dir(dir).map_err(|source| DataError::Io { path: dir.into(), source })?;
    for entry in rd {
        let entry = entry.map_err(|source| DataError::Io { path: dir.into(), source })?;
        let path = entry.path();
        if path.is_dir() {
            collect_images(root, &path, out)?;
        } else if path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        {
            out.push(path.strip_prefix(root).expect("walk stays under root").to_path_buf());
        }
    }
    Ok(())
}

fn parse_split(s: &str) -> Option<Split> {
    match s.to_ascii_lowercase().as_str() {
        "train" | "training" => Some(Split::Train),
        "test" | "testing" => Some(Split::Test),
        _ => None,
    }
}

fn bad_path(rel: &Path, reason: &str) -> DataError {
    DataError::InvalidRecord { key: rel.display().to_string(), reason: reason.into() }
}

/// LivDet-style trees: `<Train|Test>/[<sensor>/]<Live|Fake|Spoof>/[<Material>/]<finger>_<n>.<ext>`.
///
/// The finger id is the file stem up to its first `_`; spoof materials come
/// from the folder below `Fake`/`Spoof`.
#[derive(Debug, Default, Clone)]
pub struct LivDetAdapter;

impl LayoutAdapter for LivDetAdapter {
    fn classify(&self, rel: &Path) -> Result<Option<RawEntry>, DataError> {
        let parts: Vec<String> = rel.iter().map(|c| c.to_string_lossy().into_owned()).collect();
        let split_idx = parts.iter().position(|p| parse_split(p).is_some());
        let Some(split_idx) = split_idx else {
            return Err(bad_path(rel, "no Train/Test folder in path"));
        };
        let split = parse_split(&parts[split_idx]).unwrap();
        let class_idx = parts
            .iter()
            .skip(split_idx + 1)
            .position(|p| matches!(p.to_ascii_lowercase().as_str(), "live" | "fake" | "spoof"))
            .map(|i| i + split_idx + 1)
            .ok_or_else(|| bad_path(rel, "no Live/Fake/Spoof folder in path"))?;
        let file = &parts[parts.len() - 1];
        let material = if parts[class_idx].eq_ignore_ascii_case("live") {
            MaterialLabel::live()
        } else {
            if class_idx + 2 >= parts.len() {
                return Err(bad_path(rel, "spoof image without a material folder"));
            }
            MaterialLabel::new(&parts[class_idx + 1]).map_err(|e| bad_path(rel, &e.to_string()))?
        };
        let stem = Path::new(file).file_stem().unwrap().to_string_lossy().into_owned();
        let finger = stem.split('_').next().unwrap_or(&stem).to_string();
        let finger_id = if material.is_live() { format!("live_{finger}") } else { format!("{material}_{finger}") };
        Ok(Some(RawEntry { rel_path: rel.to_path_buf(), finger_id, material, split, impression_id: None }))
    }
}

/// User-configured layout: a regex over the `/`-joined relative path with
/// named groups `finger` (required), `material`, `split`, `impression`.
#[derive(Debug, Clone, Deserialize)]
pub struct PatternAdapterConfig {
    pub pattern: String,
    #[serde(default)]
    pub default_material: Option<String>,
    #[serde(default = "default_split")]
    pub default_split: Split,
    /// Skip non-matching files instead of failing.
    #[serde(default)]
    pub skip_unmatched: bool,
}

fn default_split() -> Split {
    Split::Train
}

#[derive(Debug, Clone)]
pub struct PatternAdapter {
    regex: Regex,
    config: PatternAdapterConfig,
}

impl PatternAdapter {
    pub fn new(config: PatternAdapterConfig) -> Result<Self, DataError> {
        let regex = Regex::new(&config.pattern).map_err(|e| DataError::InvalidRecord {
            key: "adapter".into(),
            reason: e.to_string(),
        })?;
        if !regex.capture_names().flatten().any(|n| n == "finger") {
            return Err(DataError::InvalidRecord {
                key: "adapter".into(),
                reason: "pattern needs a named group `finger`".into(),
            });
        }
        Ok(Self { regex, config })
    }
}

impl LayoutAdapter for PatternAdapter {
    fn classify(&self, rel: &Path) -> Result<Option<RawEntry>, DataError> {
        let joined = rel.iter().map(|c| c.to_string_lossy()).collect::<Vec<_>>().join("/");
        let Some(caps) = self.regex.captures(&joined) else {
            return if self.config.skip_unmatched { Ok(None) } else { Err(bad_path(rel, "path does not match adapter pattern")) };
        };
        let material_str = caps
            .name("material")
            .map(|m| m.as_str().to_string())
            .or_else(|| self.config.default_material.clone())
            .ok_or_else(|| bad_path(rel, "no material group and no default_material"))?;
        let material = MaterialLabel::new(&material_str).map_err(|e| bad_path(rel, &e.to_string()))?;
        let split = match caps.name("split") {
            Some(s) => parse_split(s.as_str()).ok_or_else(|| bad_path(rel, "unrecognized split"))?,
            None => self.config.default_split,
        };
        let impression_id = match caps.name("impression") {
            Some(s) => Some(s.as_str().parse().map_err(|_| bad_path(rel, "impression is not an integer"))?),
            None => None,
        };
        Ok(Some(RawEntry {
            rel_path: rel.to_path_buf(),
            finger_id: caps["finger"].to_string(),
            material,
            split,
            impression_id,
        }))
    }
}
