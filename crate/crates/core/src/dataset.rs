//! Impression records, the CSV manifest, and dataset load/export.

use std::collections::HashSet;
use std::fmt;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::image::{self, GrayImage, ImageIoError};
use crate::material::MaterialLabel;

pub const MANIFEST_HEADER: [&str; 9] = [
    "finger_id",
    "impression_id",
    "material",
    "is_live",
    "split",
    "image_path",
    "width",
    "height",
    "dpi",
];

pub const DEFAULT_DPI: u32 = 500;
pub const MANIFEST_FILE: &str = "manifest.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImpressionRecord {
    pub finger_id: String,
    pub impression_id: u32,
    pub material: MaterialLabel,
    pub is_live: bool,
    pub split: Split,
    pub image_path: PathBuf,
    pub width: u32,
    pub height: u32,
    pub dpi: u32,
}

/// Identity of a record within a manifest.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RecordKey {
    pub finger_id: String,
    pub impression_id: u32,
    pub material: MaterialLabel,
}

impl fmt::Display for RecordKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.finger_id, self.impression_id, self.material)
    }
}

impl ImpressionRecord {
    pub fn key(&self) -> RecordKey {
        RecordKey {
            finger_id: self.finger_id.clone(),
            impression_id: self.impression_id,
            material: self.material.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |reason: &str| {
            Err(DataError::InvalidRecord {
                key: self.key().to_string(),
                reason: reason.to_string(),
            })
        };
        if self.finger_id.is_empty() {
            return fail("empty finger_id");
        }
        if self.is_live != self.material.is_live() {
            return fail("is_live must be true exactly when material is `live`");
        }
        if self.width == 0 || self.height == 0 {
            return fail("zero image dimension");
        }
        if !is_contained_relative(&self.image_path) {
            return fail("image_path must be relative and stay under the dataset root");
        }
        Ok(())
    }
}

fn is_contained_relative(p: &Path) -> bool {
    !p.as_os_str().is_empty() && p.components().all(|c| matches!(c, Component::Normal(_) | Component::CurDir))
}

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("manifest line {line}: {message}")]
    ManifestParse { line: usize, message: String },
    #[error("duplicate record {0}")]
    DuplicateRecord(String),
    #[error("record {record}: image {path} is missing")]
    MissingImage { record: String, path: PathBuf },
    #[error("record {record}: {source}")]
    BadImage {
        record: String,
        #[source]
        source: ImageIoError,
    },
    #[error("record {record}: manifest says {expected:?}, file is {found:?}")]
    DimensionMismatch {
        record: String,
        expected: (u32, u32),
        found: (u32, u32),
    },
    #[error("invalid record {key}: {reason}")]
    InvalidRecord { key: String, reason: String },
    #[error("export failed at {path}: {message}")]
    Export { path: PathBuf, message: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// A set of impression records whose images live under `root`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    root: PathBuf,
    records: Vec<ImpressionRecord>,
}

impl Dataset {
    /// Validates record invariants and key uniqueness; does not touch the files.
    pub fn new(root: impl Into<PathBuf>, records: Vec<ImpressionRecord>) -> Result<Self, DataError> {
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            r.validate()?;
            if !seen.insert(r.key()) {
                return Err(DataError::DuplicateRecord(r.key().to_string()));
            }
        }
        Ok(Self { root: root.into(), records })
    }

    pub fn empty(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into(), records: Vec::new() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn records(&self) -> &[ImpressionRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn path_of(&self, record: &ImpressionRecord) -> PathBuf {
        self.root.join(&record.image_path)
    }

    pub fn load_image(&self, record: &ImpressionRecord) -> Result<GrayImage, DataError> {
        let path = self.path_of(record);
        if !path.is_file() {
            return Err(DataError::MissingImage { record: record.key().to_string(), path });
        }
        image::read_gray(&path).map_err(|source| DataError::BadImage {
            record: record.key().to_string(),
            source,
        })
    }

    /// Keeps the records matching `pred`, preserving order.
    pub fn filter(&self, pred: impl Fn(&ImpressionRecord) -> bool) -> Dataset {
        Dataset {
            root: self.root.clone(),
            records: self.records.iter().filter(|r| pred(r)).cloned().collect(),
        }
    }

    /// Distinct finger ids in first-appearance order.
    pub fn finger_ids(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.records
            .iter()
            .filter(|r| seen.insert(r.finger_id.clone()))
            .map(|r| r.finger_id.clone())
            .collect()
    }

    pub fn materials(&self) -> Vec<MaterialLabel> {
        let mut m: Vec<_> = self.records.iter().map(|r| r.material.clone()).collect();
        m.sort();
        m.dedup();
        m
    }

    pub fn has_live(&self) -> bool {
        self.records.iter().any(|r| r.is_live)
    }

    pub fn has_spoof(&self) -> bool {
        self.records.iter().any(|r| !r.is_live)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    finger_id: String,
    impression_id: u32,
    material: String,
    is_live: bool,
    split: Split,
    image_path: String,
    width: u32,
    height: u32,
    dpi: u32,
}

/// Parses a manifest without touching the referenced images.
pub fn read_manifest(path: &Path) -> Result<Vec<ImpressionRecord>, DataError> {
    let file = std::fs::File::open(path).map_err(|source| DataError::Io { path: path.into(), source })?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = rdr.headers().map_err(|e| DataError::ManifestParse { line: 1, message: e.to_string() })?;
    if headers.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(DataError::ManifestParse {
            line: 1,
            message: format!("expected header `{}`", MANIFEST_HEADER.join(",")),
        });
    }
    let mut records = Vec::new();
    for (i, row) in rdr.deserialize::<ManifestRow>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| DataError::ManifestParse { line, message: e.to_string() })?;
        let material = MaterialLabel::new(&row.material)
            .map_err(|e| DataError::ManifestParse { line, message: e.to_string() })?;
        records.push(ImpressionRecord {
            finger_id: row.finger_id,
            impression_id: row.impression_id,
            material,
            is_live: row.is_live,
            split: row.split,
            image_path: PathBuf::from(row.image_path),
            width: row.width,
            height: row.height,
            dpi: row.dpi,
        });
    }
    Ok(records)
}

pub fn write_manifest(path: &Path, records: &[ImpressionRecord]) -> Result<(), DataError> {
    let io_err = |source| DataError::Io { path: path.into(), source };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err)?;
    }
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    let to_export = |e: csv::Error| DataError::Export { path: path.into(), message: e.to_string() };
    wtr.write_record(MANIFEST_HEADER).map_err(to_export)?;
    for r in records {
        wtr.serialize(ManifestRow {
            finger_id: r.finger_id.clone(),
            impression_id: r.impression_id,
            material: r.material.to_string(),
            is_live: r.is_live,
            split: r.split,
            image_path: manifest_path_string(&r.image_path),
            width: r.width,
            height: r.height,
            dpi: r.dpi,
        })
        .map_err(to_export)?;
    }
    let bytes = wtr.into_inner().map_err(|e| DataError::Export { path: path.into(), message: e.to_string() })?;
    std::fs::write(path, bytes).map_err(io_err)
}

/// Forward-slash form so manifests are portable.
fn manifest_path_string(p: &Path) -> String {
    p.components()
        .filter_map(|c| match c {
            Component::Normal(s) => Some(s.to_string_lossy().into_owned()),
            _ => None,
        })
        .collect::<Vec<_>>()
        .join("/")
}

/// Loads a manifest and checks that every referenced image exists, decodes as
/// 8-bit grayscale, and has the dimensions the manifest declares.
pub fn load_dataset(root: &Path, manifest: &Path) -> Result<Dataset, DataError> {
    let records = read_manifest(manifest)?;
    let dataset = Dataset::new(root, records)?;
    for r in dataset.records() {
        let path = dataset.path_of(r);
        if !path.is_file() {
            return Err(DataError::MissingImage { record: r.key().to_string(), path });
        }
        let found = image::probe_gray(&path).map_err(|source| DataError::BadImage {
            record: r.key().to_string(),
            source,
        })?;
        if found != (r.width, r.height) {
            return Err(DataError::DimensionMismatch {
                record: r.key().to_string(),
                expected: (r.width, r.height),
                found,
            });
        }
    }
    Ok(dataset)
}

const LOSSLESS_EXTENSIONS: [&str; 4] = ["png", "bmp", "tif", "tiff"];

/// Relative path an image is exported under; lossy containers become PNG.
pub fn export_path(image_path: &Path) -> PathBuf {
    let lossless = image_path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| LOSSLESS_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false);
    if lossless {
        image_path.to_path_buf()
    } else {
        image_path.with_extension("png")
    }
}

/// Re-encodes every image as 8-bit grayscale under `out_root` and writes
/// `out_root/manifest.csv`. Returns the manifest path.
pub fn export_dataset(dataset: &Dataset, out_root: &Path) -> Result<PathBuf, DataError> {
    std::fs::create_dir_all(out_root).map_err(|e| DataError::Export {
        path: out_root.into(),
        message: e.to_string(),
    })?;
    let mut out_records = Vec::with_capacity(dataset.len());
    for r in dataset.records() {
        let img = dataset.load_image(r)?;
        let rel = export_path(&r.image_path);
        let dst = out_root.join(&rel);
        image::write_gray(&dst, &img).map_err(|e| DataError::Export { path: dst.clone(), message: e.to_string() })?;
        out_records.push(ImpressionRecord { image_path: rel, ..r.clone() });
    }
    let manifest = out_root.join(MANIFEST_FILE);
    write_manifest(&manifest, &out_records).map_err(|e| match e {
        DataError::Io { path, source } => DataError::Export { path, message: source.to_string() },
        other => other,
    })?;
    Ok(manifest)
}
