//! Data model, geometry and evaluation primitives for synthetic live and
//! spoof fingerprint corpora. Nothing here depends on a neural-network runtime.

pub mod binarize;
pub mod dataset;
pub mod image;
pub mod ingest;
pub mod matching;
pub mod material;
pub mod metrics;
pub mod minutiae;
pub mod pad;
pub mod seed;
pub mod toy;
pub mod warp;

pub use dataset::{load_dataset, export_dataset, Dataset, DataError, ImpressionRecord, Split};
pub use image::GrayImage;
pub use material::MaterialLabel;
