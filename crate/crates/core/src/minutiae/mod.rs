//! Crossing-number minutiae on a Zhang-Suen skeleton, and corpus statistics.

mod extract;
mod stats;
pub mod thinning;

pub use extract::{
    crossing_number, extract_minutiae, extract_minutiae_with, ExtractConfig, ExtractionError, Minutia, MinutiaKind,
};
pub use stats::{
    aggregate_stats, fingerprint_stats, fingerprint_stats_with, image_stats, minutiae_per_megapixel,
    write_minutiae_csv, write_stats_table, FingerprintStats, ImageStats, MeanStd, StatsConfig, StatsError,
    NFIQ2_ROW, PER_MP_ROW, STATS_ROWS,
};
