//! Stable seed derivation.
//!
//! Every random draw in the generation pipeline is keyed by
//! `(root_seed, stage, finger, impression, material)`. The key is serialized
//! with length prefixes, hashed with SHA-256, and the first eight digest bytes
//! are read little-endian. Derived seeds do not depend on iteration order, so
//! fingers can be generated in any order or in parallel.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

const DOMAIN: &[u8] = b"forge-seed-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Identity,
    Warp,
    Texture,
    Other(&'static str),
}

impl Stage {
    fn tag(&self) -> &'static str {
        match self {
            Stage::Identity => "identity",
            Stage::Warp => "warp",
            Stage::Texture => "texture",
            Stage::Other(s) => s,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedKey<'a> {
    pub stage: Stage,
    pub finger: u64,
    pub impression: u64,
    pub material: &'a str,
}

pub fn derive_seed(root_seed: u64, key: SeedKey<'_>) -> u64 {
    let mut h = Sha256::new();
    h.update(DOMAIN);
    h.update(root_seed.to_le_bytes());
    let tag = key.stage.tag().as_bytes();
    h.update((tag.len() as u64).to_le_bytes());
    h.update(tag);
    h.update(key.finger.to_le_bytes());
    h.update(key.impression.to_le_bytes());
    h.update((key.material.len() as u64).to_le_bytes());
    h.update(key.material.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Seed for a named sub-task (training cells, data splits, ...).
pub fn derive_named(root_seed: u64, name: &str, index: u64) -> u64 {
    derive_seed(root_seed, SeedKey { stage: Stage::Other("named"), finger: index, impression: 0, material: name })
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
