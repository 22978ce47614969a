//! Procedural stand-in corpora for desk-scale training and tests.
//!
//! A toy finger is a field of curved ridges (concentric arcs about a point
//! below the print, bent by smooth phase noise) with phase vortices that
//! create ridge endings and bifurcations. Impressions jitter pose and add a
//! mild elastic bend; materials change contrast, ridge width, blur, noise and
//! blotching. The `Synthetic` domain applies a small systematic style shift
//! so that "real" and "synthetic" toy data are distinguishable.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{write_manifest, DataError, Dataset, ImpressionRecord, Split, DEFAULT_DPI, MANIFEST_FILE};
use crate::image::{gaussian_blur, write_gray, GrayImage};
use crate::material::MaterialLabel;
use crate::seed::{derive_named, rng_from};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyFinger {
    /// Arc center in units of the image side.
    pub arc_center: (f64, f64),
    pub period: f64,
    /// `(x, y, sign)` in units of the image side.
    pub vortices: Vec<(f64, f64, f64)>,
    /// `(kx, ky, amplitude, phase)` low-frequency phase modulation.
    pub modes: Vec<(f64, f64, f64, f64)>,
    /// Half-axes of the elliptical contact region, in units of the side.
    pub extent: (f64, f64),
}

impl ToyFinger {
    pub fn sample(rng: &mut ChaCha8Rng) -> Self {
        let arc_center = (rng.random_range(0.3..0.7), rng.random_range(1.0..1.6));
        let period = rng.random_range(8.0..10.5);
        let n_vortex = rng.random_range(14..22);
        let vortices = (0..n_vortex)
            .map(|_| {
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                (rng.random_range(0.22..0.78), rng.random_range(0.15..0.85), sign)
            })
            .collect();
        let modes = (0..4)
            .map(|_| {
                (
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-3.0..3.0),
                    rng.random_range(0.5..2.5),
                    rng.random_range(0.0..2.0 * PI),
                )
            })
            .collect();
        let extent = (rng.random_range(0.32..0.4), rng.random_range(0.4..0.47));
        Self { arc_center, period, vortices, modes, extent }
    }

    /// Ridge phase at image position `(x, y)` of a `size`-pixel image.
    fn phase(&self, x: f64, y: f64, size: f64) -> f64 {
        let (u, v) = (x / size, y / size);
        let r = ((x - self.arc_center.0 * size).powi(2) + (y - self.arc_center.1 * size).powi(2)).sqrt();
        let mut p = 2.0 * PI * r / self.period;
        for &(kx, ky, a, ph) in &self.modes {
            p += a * (PI * (kx * u + ky * v) + ph).sin();
        }
        for &(vx, vy, s) in &self.vortices {
            p += s * (y - vy * size).atan2(x - vx * size);
        }
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyImpression {
    pub rotation_deg: f64,
    pub shift: (f64, f64),
    /// Amplitude (px) and wavelength (units of the side) of a sinusoidal bend.
    pub bend: (f64, f64),
    pub extent_scale: f64,
}

impl ToyImpression {
    pub const IDENTITY: Self = Self { rotation_deg: 0.0, shift: (0.0, 0.0), bend: (0.0, 1.0), extent_scale: 1.0 };

    pub fn sample(rng: &mut ChaCha8Rng) -> Self {
        Self {
            rotation_deg: rng.random_range(-10.0..10.0),
            shift: (rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0)),
            bend: (rng.random_range(0.0..3.0), rng.random_range(0.6..1.4)),
            extent_scale: rng.random_range(0.9..1.05),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyDomain {
    Real,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyStyle {
    /// Ink darkness of a ridge on a white background.
    pub contrast: f64,
    /// Background level inside the contact region.
    pub paper: f64,
    /// Ridge-width bias: negative widens ridges.
    pub width_bias: f64,
    pub blur_sigma: f64,
    pub noise_sigma: f64,
    /// Number of bright smudges.
    pub blotches: usize,
    /// Amplitude of low-frequency multiplicative grain.
    pub grain: f64,
}

/// Deterministic style table; unknown spoof materials get a hash-perturbed
/// generic spoof style.
pub fn material_style(material: &MaterialLabel, domain: ToyDomain) -> ToyStyle {
    let mut s = match material.as_str() {
        "live" => ToyStyle { contrast: 0.8, paper: 0.95, width_bias: 0.0, blur_sigma: 0.6, noise_sigma: 0.03, blotches: 0, grain: 0.02 },
        "ecoflex" => ToyStyle { contrast: 0.5, paper: 0.9, width_bias: -0.3, blur_sigma: 1.2, noise_sigma: 0.06, blotches: 4, grain: 0.08 },
        "gelatine" => ToyStyle { contrast: 0.6, paper: 0.85, width_bias: 0.25, blur_sigma: 1.4, noise_sigma: 0.02, blotches: 2, grain: 0.12 },
        other => {
            let h = other.bytes().fold(7u64, |a, b| a.wrapping_mul(31).wrapping_add(b as u64));
            let f = (h % 1000) as f64 / 1000.0;
            ToyStyle {
                contrast: 0.45 + 0.2 * f,
                paper: 0.86 + 0.06 * f,
                width_bias: -0.3 + 0.5 * f,
                blur_sigma: 1.0 + 0.6 * f,
                noise_sigma: 0.05,
                blotches: 2 + (h % 3) as usize,
                grain: 0.06 + 0.06 * f,
            }
        }
    };
    if domain == ToyDomain::Synthetic {
        s.contrast -= 0.05;
        s.blur_sigma += 0.3;
        s.noise_sigma *= 1.3;
    }
    s
}

/// Clean ridge intensity in `[0, 1]` (1 = ridge) and the contact mask.
pub fn ridge_pattern(finger: &ToyFinger, imp: &ToyImpression, size: usize, width_bias: f64) -> (Array2<f64>, Array2<bool>) {
    let s = size as f64;
    let c = (s - 1.0) / 2.0;
    let (sin, cos) = imp.rotation_deg.to_radians().sin_cos();
    let (ax, ay) = (finger.extent.0 * s * imp.extent_scale, finger.extent.1 * s * imp.extent_scale);
    let mut ridge = Array2::zeros((size, size));
    let mut mask = Array2::from_elem((size, size), false);
    for y in 0..size {
        for x in 0..size {
            // map the output pixel back into finger coordinates
            let (qx, qy) = (x as f64 - c - imp.shift.0, y as f64 - c - imp.shift.1);
            let mut fx = cos * qx + sin * qy + c;
            let fy = -sin * qx + cos * qy + c;
            fx += imp.bend.0 * (2.0 * PI * fy / (imp.bend.1 * s)).sin();
            let e = ((fx - c) / ax).powi(2) + ((fy - c) / ay).powi(2);
            if e > 1.0 {
                continue;
            }
            mask[[y, x]] = true;
            let v = finger.phase(fx, fy, s).cos();
            ridge[[y, x]] = 1.0 / (1.0 + (-(v - width_bias) * 6.0).exp());
        }
    }
    (ridge, mask)
}

/// Grayscale impression (dark ridges on white).
pub fn render_toy(
    finger: &ToyFinger,
    imp: &ToyImpression,
    style: &ToyStyle,
    size: usize,
    rng: &mut ChaCha8Rng,
) -> GrayImage {
    let (ridge, mask) = ridge_pattern(finger, imp, size, style.width_bias);
    let s = size as f64;
    let grain_modes: Vec<(f64, f64, f64)> =
        (0..3).map(|_| (rng.random_range(2.0..8.0), rng.random_range(2.0..8.0), rng.random_range(0.0..2.0 * PI))).collect();
    let blotches: Vec<(f64, f64, f64)> = (0..style.blotches)
        .map(|_| (rng.random_range(0.25..0.75) * s, rng.random_range(0.2..0.8) * s, rng.random_range(0.04..0.1) * s))
        .collect();
    let mut img = Array2::from_shape_fn((size, size), |(y, x)| {
        if !mask[[y, x]] {
            return 1.0f32;
        }
        let (u, v) = (x as f64 / s, y as f64 / s);
        let grain: f64 = grain_modes.iter().map(|&(a, b, p)| (PI * (a * u + b * v) + p).sin()).sum::<f64>() / 3.0;
        let mut ink = style.contrast * ridge[[y, x]] * (1.0 + style.grain * grain);
        for &(bx, by, br) in &blotches {
            let d2 = (x as f64 - bx).powi(2) + (y as f64 - by).powi(2);
            ink *= 1.0 - 0.7 * (-d2 / (2.0 * br * br)).exp();
        }
        (style.paper - ink) as f32
    });
    if style.blur_sigma > 0.0 {
        img = gaussian_blur(&img, style.blur_sigma);
    }
    for ((y, x), p) in img.indexed_iter_mut() {
        let n: f64 = rng.sample(StandardNormal);
        let noise = if mask[[y, x]] { style.noise_sigma * n } else { 0.2 * style.noise_sigma * n };
        *p = (*p as f64 + noise).clamp(0.0, 1.0) as f32;
    }
    img
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyCorpusConfig {
    pub n_fingers: usize,
    pub impressions: usize,
    pub materials: Vec<MaterialLabel>,
    pub size: usize,
    pub seed: u64,
    pub domain: ToyDomain,
    /// Prefix of generated finger ids, so corpora can be made disjoint.
    pub finger_prefix: String,
    /// Fraction of fingers (by index from the end) placed in the test split.
    pub test_fraction: f64,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        Self {
            n_fingers: 8,
            impressions: 2,
            materials: vec![MaterialLabel::live()],
            size: 128,
            seed: 0,
            domain: ToyDomain::Real,
            finger_prefix: "toy".into(),
            test_fraction: 0.0,
        }
    }
}

/// Renders one image per (finger, impression, material); all materials of
/// an impression share its pose.
pub fn toy_images(cfg: &ToyCorpusConfig) -> Vec<(ImpressionRecord, GrayImage)> {
    let n_test = (cfg.n_fingers as f64 * cfg.test_fraction).round() as usize;
    let mut out = Vec::with_capacity(cfg.n_fingers * cfg.impressions * cfg.materials.len());
    for f in 0..cfg.n_fingers {
        let finger_id = format!("{}{:04}", cfg.finger_prefix, f);
        let finger = ToyFinger::sample(&mut rng_from(derive_named(cfg.seed, "toy-finger", f as u64)));
        let split = if f >= cfg.n_fingers - n_test { Split::Test } else { Split::Train };
        for i in 0..cfg.impressions {
            let idx = (f * cfg.impressions + i) as u64;
            let imp = if i == 0 {
                ToyImpression::IDENTITY
            } else {
                ToyImpression::sample(&mut rng_from(derive_named(cfg.seed, "toy-impression", idx)))
            };
            for (mi, material) in cfg.materials.iter().enumerate() {
                let style = material_style(material, cfg.domain);
                let mut rng = rng_from(derive_named(cfg.seed, "toy-render", idx * 64 + mi as u64));
                let img = render_toy(&finger, &imp, &style, cfg.size, &mut rng);
                let record = ImpressionRecord {
                    finger_id: finger_id.clone(),
                    impression_id: i as u32,
                    material: material.clone(),
                    is_live: material.is_live(),
                    split,
                    image_path: format!("{}/{}_{}.png", material, finger_id, i).into(),
                    width: cfg.size as u32,
                    height: cfg.size as u32,
                    dpi: DEFAULT_DPI,
                };
                out.push((record, img));
            }
        }
    }
    out
}

/// Writes a toy corpus with its manifest under `root`.
pub fn write_toy_corpus(root: &Path, cfg: &ToyCorpusConfig) -> Result<Dataset, DataError> {
    let items = toy_images(cfg);
    let mut records = Vec::with_capacity(items.len());
    for (r, img) in items {
        let path = root.join(&r.image_path);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|source| DataError::Io { path: parent.to_path_buf(), source })?;
        }
        write_gray(&path, &img).map_err(|e| DataError::Export { path: path.clone(), message: e.to_string() })?;
        records.push(r);
    }
    write_manifest(&root.join(MANIFEST_FILE), &records)?;
    Dataset::new(root, records)
}
