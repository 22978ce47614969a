//! Acceptance suite. One line per criterion:
//! `[PASS] <n> <name> (<seconds>s): <detail>` or `[FAIL] ...`.
//! Extra arguments are substring filters on the criterion name.

mod common;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use forge_core::binarize::{classical_binarize, ClassicalBinarizer};
use forge_core::dataset::{read_manifest, write_manifest, Dataset, MANIFEST_FILE};
use forge_core::image::{is_binary, read_gray, to_luma, write_gray, GrayImage};
use forge_core::material::MaterialLabel;
use forge_core::matching::{leakage_check, ProjectionEmbedder};
use forge_core::metrics::{tar_at_far, tdr_at_fdr, DetectionScoreSet, ScoreSet};
use forge_core::minutiae::{
    crossing_number, extract_minutiae, extract_minutiae_with, fingerprint_stats, minutiae_per_megapixel,
    write_stats_table, ExtractConfig, MinutiaKind, PER_MP_ROW, STATS_ROWS,
};
use forge_core::pad::FusionConfig;
use forge_core::seed::rng_from;
use forge_core::toy::{toy_images, write_toy_corpus, ToyCorpusConfig, ToyDomain};
use forge_core::warp::{
    apply_warp, compose_distortion_field, sample_pose_and_coeffs, synthesize_basis, DistortionSample, Pose, VectorField,
    MAX_ROTATION_DEG, MAX_TRANSLATION_PX,
};
use forge_nn::binarizer::{pixel_accuracy, train_binarizer, BinarizerConfig, BinarizerTrainConfig, BinaryPair, LearnedBinarizer};
use forge_nn::detector::{
    detect_minutiae, hold_out, train_detector, Branch, DetectorConfig, DetectorSample, DetectorTrainConfig, SpoofDetector,
};
use forge_nn::embedder::{EmbedderConfig, LearnedEmbedder};
use forge_nn::experiment::{run_augmentation_experiment, Composition, EvalSet, ExperimentConfig, RESULTS_HEADER};
use forge_nn::gan::{master_target, train_gan_on_images, GanConfig, GanTrainConfig, MasterPrintGan};
use forge_nn::losses::{adversarial_loss, identity_loss, pixel_loss, renderer_losses, LossWeights};
use forge_nn::renderer::{render_pair, sample_texture_latent, train_renderer_on, Renderer, RendererConfig, RendererTrainConfig};
use forge_pipeline::config::CheckpointPaths;
use forge_pipeline::generate::{generate_with, Stages, GENERATION_LOG};
use forge_pipeline::{generate_dataset, GenerationConfig};
use ndarray::Array2;
use rand::Rng;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

// 1 ----------------------------------------------------------------------

fn bilinear_corner_aligned(grid: &Array2<f64>, out_h: usize, out_w: usize, y: usize, x: usize) -> f64 {
    let (gh, gw) = grid.dim();
    let gx = x as f64 * (gw - 1) as f64 / (out_w - 1) as f64;
    let gy = y as f64 * (gh - 1) as f64 / (out_h - 1) as f64;
    let (x0, y0) = ((gx.floor() as usize).min(gw - 1), (gy.floor() as usize).min(gh - 1));
    let (x1, y1) = ((x0 + 1).min(gw - 1), (y0 + 1).min(gh - 1));
    let (fx, fy) = (gx - x0 as f64, gy - y0 as f64);
    let g = |yy: usize, xx: usize| grid[[yy, xx]];
    (g(y0, x0) * (1.0 - fx) + g(y0, x1) * fx) * (1.0 - fy) + (g(y1, x0) * (1.0 - fx) + g(y1, x1) * fx) * fy
}

fn max_diff(a: &VectorField, b: &VectorField) -> f64 {
    a.dx.iter().zip(&b.dx).chain(a.dy.iter().zip(&b.dy)).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
}

fn deformation_model() -> Check {
    let t0 = Instant::now();
    let basis = ok(synthesize_basis(16, 16, 6, 42))?;
    let (w, h) = (120, 100);
    let zero = ok(compose_distortion_field(&basis, &[0.0; 6], w, h))?;
    ensure!(zero.grid_field == *basis.mean_field(), "c = 0 grid differs from the mean");
    ensure!(zero.field == basis.mean_field().upsample(h, w), "c = 0 dense field differs from the upsampled mean");

    let mut rng = rng_from(1);
    let mut coeffs = || -> Vec<f64> { (0..6).map(|_| rng.random_range(-2.0..2.0)).collect() };
    let mut worst_lin: f64 = 0.0;
    for _ in 0..100 {
        let (a, b) = (coeffs(), coeffs());
        let ab: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let fa = ok(compose_distortion_field(&basis, &a, w, h))?;
        let fb = ok(compose_distortion_field(&basis, &b, w, h))?;
        let fab = ok(compose_distortion_field(&basis, &ab, w, h))?;
        // deviations from the mean add up
        let dev = |f: &VectorField, m: &VectorField| VectorField { dx: &f.dx - &m.dx, dy: &f.dy - &m.dy };
        let lhs = dev(&fab.field, &zero.field);
        let mut rhs = dev(&fa.field, &zero.field);
        rhs.axpy(1.0, &dev(&fb.field, &zero.field));
        worst_lin = worst_lin.max(max_diff(&lhs, &rhs));
    }
    ensure!(worst_lin <= 1e-9, "linearity error {worst_lin:e}");

    let mut worst_grid: f64 = 0.0;
    let mut worst_dense: f64 = 0.0;
    for _ in 0..10 {
        let c = coeffs();
        let s = ok(compose_distortion_field(&basis, &c, w, h))?;
        let (gh, gw) = basis.mean_field().dim();
        let mut brute = VectorField::zeros(gh, gw);
        for y in 0..gh {
            for x in 0..gw {
                let mut dx = basis.mean_field().dx[[y, x]];
                let mut dy = basis.mean_field().dy[[y, x]];
                for i in 0..6 {
                    let k = c[i] * basis.eigenvalues()[i].sqrt();
                    dx += k * basis.eigen_fields()[i].dx[[y, x]];
                    dy += k * basis.eigen_fields()[i].dy[[y, x]];
                }
                brute.dx[[y, x]] = dx;
                brute.dy[[y, x]] = dy;
            }
        }
        worst_grid = worst_grid.max(max_diff(&s.grid_field, &brute));
        for y in 0..h {
            for x in 0..w {
                let ex = bilinear_corner_aligned(&brute.dx, h, w, y, x);
                let ey = bilinear_corner_aligned(&brute.dy, h, w, y, x);
                worst_dense = worst_dense.max((s.field.dx[[y, x]] - ex).abs()).max((s.field.dy[[y, x]] - ey).abs());
            }
        }
    }
    ensure!(worst_grid <= 1e-9, "grid vs per-cell recomputation {worst_grid:e}");
    ensure!(worst_dense <= 1e-9, "dense field vs manual bilinear {worst_dense:e}");
    let secs = t0.elapsed().as_secs_f64();
    ensure!(secs < 10.0, "took {secs:.1}s (limit 10s)");
    Ok(format!("linearity {worst_lin:.1e}, grid {worst_grid:.1e}, dense {worst_dense:.1e} (tol 1e-9)"))
}

// 2 ----------------------------------------------------------------------

fn pose_sampling() -> Check {
    let t0 = Instant::now();
    let basis = ok(synthesize_basis(16, 16, 6, 3))?;
    let mut rng = rng_from(2024);
    let n = 10_000;
    let mut c1 = Vec::with_capacity(n);
    for _ in 0..n {
        let (pose, c) = sample_pose_and_coeffs(&mut rng, &basis, 0.66);
        ensure!(pose.rotation.abs() <= MAX_ROTATION_DEG, "rotation {}", pose.rotation);
        ensure!(pose.tx.abs() <= MAX_TRANSLATION_PX && pose.ty.abs() <= MAX_TRANSLATION_PX, "translation {pose:?}");
        ensure!(c.len() == 6, "{} coefficients", c.len());
        c1.push(c[0]);
    }
    let mean = c1.iter().sum::<f64>() / n as f64;
    let std = (c1.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    ensure!((std - 0.66).abs() <= 0.05, "std(c1) = {std:.4}, expected 0.66 +- 0.05");
    let secs = t0.elapsed().as_secs_f64();
    ensure!(secs < 10.0, "took {secs:.1}s (limit 10s)");
    Ok(format!("{n} draws in range, std(c1) = {std:.4} (0.66 +- 0.05)"))
}

// 3 ----------------------------------------------------------------------

fn random_image(h: usize, w: usize, seed: u64) -> GrayImage {
    let mut rng = rng_from(seed);
    Array2::from_shape_fn((h, w), |_| rng.random::<f32>())
}

fn warp_invariants() -> Check {
    let t0 = Instant::now();
    let img = random_image(64, 80, 5);
    let same = ok(apply_warp(&img, &Pose::IDENTITY, &DistortionSample::zero(64, 80)))?;
    ensure!(
        img.iter().zip(same.iter()).all(|(a, b)| a.to_bits() == b.to_bits()),
        "identity warp is not bitwise identity"
    );

    let mut impulses = 0;
    for (px, py, tx, ty) in [(20usize, 30usize, 7.0, -5.0), (40, 10, -12.0, 9.0), (5, 50, 25.0, 0.0)] {
        let mut white = Array2::from_elem((64, 80), 1.0f32);
        white[[py, px]] = 0.0;
        let out = ok(apply_warp(&white, &ok(Pose::new(0.0, tx, ty))?, &DistortionSample::zero(64, 80)))?;
        let (qx, qy) = ((px as f64 + tx) as usize, (py as f64 + ty) as usize);
        for ((y, x), &v) in out.indexed_iter() {
            let expect = if (x, y) == (qx, qy) { 0.0 } else { 1.0 };
            ensure!(v == expect, "translation ({tx}, {ty}): pixel ({x}, {y}) = {v}, expected {expect}");
        }
        impulses += 1;
    }

    let square = random_image(64, 64, 6);
    let quarter = Pose::unchecked(90.0, 0.0, 0.0);
    let zero = DistortionSample::zero(64, 64);
    let mut cur = square.clone();
    for _ in 0..4 {
        cur = ok(apply_warp(&cur, &quarter, &zero))?;
    }
    let err = square.iter().zip(cur.iter()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    ensure!(err <= 1e-6, "four quarter turns differ by {err:e}");
    let once = ok(apply_warp(&square, &quarter, &zero))?;
    let turned_ccw = Array2::from_shape_fn((64, 64), |(y, x)| square[[x, 63 - y]]);
    let turned_cw = Array2::from_shape_fn((64, 64), |(y, x)| square[[63 - x, y]]);
    ensure!(once == turned_ccw || once == turned_cw, "a quarter turn is not an exact axis permutation");
    let secs = t0.elapsed().as_secs_f64();
    ensure!(secs < 30.0, "took {secs:.1}s (limit 30s)");
    Ok(format!("identity bitwise, {impulses} impulses moved exactly, 4x90deg error {err:.1e} (tol 1e-6)"))
}

// 4 ----------------------------------------------------------------------

fn scalar(t: &Tensor) -> Result<f64, String> {
    ok(t.to_dtype(DType::F64).and_then(|t| t.to_scalar::<f64>()))
}

fn log_sigmoid(x: f64) -> f64 {
    let x = x.clamp(-30.0, 30.0);
    -((-x).max(0.0) + (-(x.abs())).exp().ln_1p())
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

fn loss_arithmetic() -> Check {
    let dev = Device::Cpu;
    let weights = LossWeights::default();
    ensure!(
        (weights.lambda_adv, weights.lambda_dp, weights.lambda_i) == (1.0, 2.0, 10.0),
        "default weights {weights:?}"
    );
    let exact = weights.combine(0.1, 0.2, 0.3);
    ensure!(exact == 3.5, "combine(0.1, 0.2, 0.3) = {exact}");

    let mut rng = rng_from(77);
    let mut worst: f64 = 0.0;
    for trial in 0..50 {
        let n = rng.random_range(1..5usize);
        let d = rng.random_range(4..64usize);
        let (h, w) = (rng.random_range(4..20usize), rng.random_range(4..20usize));
        let scale = 10f64.powi(rng.random_range(-2..2));
        let mut draw = |len: usize| -> Vec<f64> { (0..len).map(|_| scale * rng.random_range(-1.0..1.0)).collect() };
        let (r, r_hat) = (draw(n * d), draw(n * d));
        let (iw, iw_hat) = (draw(n * h * w), draw(n * h * w));
        let (d_real, d_fake) = (draw(n), draw(n));
        let t = |v: &[f64], shape: &[usize]| ok(Tensor::from_vec(v.to_vec(), shape, &dev));
        let rt = t(&r, &[n, d])?;
        let rht = t(&r_hat, &[n, d])?;
        let it = t(&iw, &[n, 1, h, w])?;
        let iht = t(&iw_hat, &[n, 1, h, w])?;
        let drt = t(&d_real, &[n, 1])?;
        let dft = t(&d_fake, &[n, 1])?;

        let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        let l_dp = 0.5 * sq(&r, &r_hat) / n as f64;
        let l_i = 0.5 * sq(&iw, &iw_hat) / n as f64;
        let l_adv = -d_fake.iter().map(|&x| log_sigmoid(x)).sum::<f64>() / n as f64;
        let l_d = -d_real.iter().map(|&x| log_sigmoid(x)).sum::<f64>() / n as f64
            - d_fake.iter().map(|&x| log_sigmoid(-x)).sum::<f64>() / n as f64;
        let l_g = 1.0 * l_adv + 2.0 * l_dp + 10.0 * l_i;

        let got_dp = scalar(&ok(identity_loss(&rt, &rht))?)?;
        let got_i = scalar(&ok(pixel_loss(&it, &iht))?)?;
        let adv = ok(adversarial_loss(&drt, &dft))?;
        let all = ok(renderer_losses(&rt, &rht, &it, &iht, &drt, &dft, &weights))?;
        for (name, got, want) in [
            ("L_dp", got_dp, l_dp),
            ("L_i", got_i, l_i),
            ("L_adv", scalar(&adv.loss_g)?, l_adv),
            ("L_D", scalar(&adv.loss_d)?, l_d),
            ("L_G", scalar(&all.generator)?, l_g),
            ("L_G (scalar combine)", weights.combine(l_adv, l_dp, l_i), l_g),
        ] {
            let e = rel(got, want);
            ensure!(e <= 1e-6, "trial {trial}: {name} = {got}, recomputed {want} (rel {e:e})");
            worst = worst.max(e);
        }
    }
    Ok(format!("50 random tensor sets, worst relative error {worst:.1e} (tol 1e-6); (0.1, 0.2, 0.3) -> 3.5 exact"))
}

// 5 ----------------------------------------------------------------------

/// Smallest candidate threshold whose negative rate meets the target, by linear scan.
fn brute_force(pos: &[f64], neg: &[f64], target: f64) -> (f64, f64) {
    let mut cands: Vec<f64> = pos.iter().chain(neg).copied().collect();
    cands.sort_by(f64::total_cmp);
    cands.dedup();
    cands.push(cands.last().unwrap().next_up());
    let rate = |v: &[f64], tau: f64| v.iter().filter(|&&s| s >= tau).count() as f64 / v.len() as f64;
    for &tau in &cands {
        if rate(neg, tau) <= target {
            return (tau, rate(pos, tau));
        }
    }
    unreachable!("the top candidate admits no negatives")
}

fn metric_oracles() -> Check {
    let mut rng = rng_from(9);
    let targets = [0.0, 1e-4, 1e-3, 0.002, 0.01, 0.05, 0.1, 0.3, 0.5, 1.0];
    let mut compared = 0;
    for set in 0..100 {
        let total = rng.random_range(2..=1000usize);
        let n_pos = rng.random_range(1..total);
        let ties = set % 2 == 0;
        let mut draw = |shift: f64| -> f64 {
            let v: f64 = rng.random_range(-1.0..1.0) + shift;
            if ties {
                (v * 20.0).round() / 20.0
            } else {
                v
            }
        };
        let pos: Vec<f64> = (0..n_pos).map(|_| draw(0.4)).collect();
        let neg: Vec<f64> = (0..total - n_pos).map(|_| draw(0.0)).collect();
        let tar = ok(tar_at_far(&ok(ScoreSet::new(pos.clone(), neg.clone()))?, &targets))?;
        let det = DetectionScoreSet { live_scores: neg.clone(), spoof_scores: pos.clone() };
        let mut last_tdr = -1.0;
        for (k, &t) in targets.iter().enumerate() {
            let (tau, rate) = brute_force(&pos, &neg, t);
            ensure!(
                tar[k].threshold == tau && tar[k].rate == rate,
                "set {set} FAR {t}: got ({}, {}), brute force ({tau}, {rate})",
                tar[k].threshold,
                tar[k].rate
            );
            let (dt, dr) = ok(tdr_at_fdr(&det, t))?;
            ensure!(dt == tau && dr == rate, "set {set} FDR {t}: got ({dt}, {dr}), brute force ({tau}, {rate})");
            ensure!(dr >= last_tdr, "set {set}: TDR fell from {last_tdr} to {dr} as the FDR target rose to {t}");
            last_tdr = dr;
            compared += 2;
        }
    }
    let fusion = FusionConfig::default();
    let mut rng = rng_from(10);
    for _ in 0..10_000 {
        let (p, w): (f64, f64) = (rng.random(), rng.random());
        let f = fusion.fuse(p, w);
        ensure!(f == 0.8 * p + 0.2 * w, "fuse({p}, {w}) = {f}, expected {}", 0.8 * p + 0.2 * w);
    }
    Ok(format!("{compared} operating points equal brute force exactly; TDR monotone; 10000 fusions exact"))
}

// 6 ----------------------------------------------------------------------

fn kinds(m: &[forge_core::minutiae::Minutia]) -> (usize, usize) {
    let e = m.iter().filter(|m| m.kind == MinutiaKind::Ending).count();
    (e, m.iter().filter(|m| m.kind == MinutiaKind::Bifurcation).count())
}

fn parallel_ridges(break_at: Option<usize>) -> GrayImage {
    Array2::from_shape_fn((80, 80), |(y, x)| {
        let on = (8..72).contains(&y) && y % 8 < 3;
        let gap = break_at.is_some_and(|r| y / 8 == r && (38..43).contains(&x));
        if on && !gap {
            1.0
        } else {
            0.0
        }
    })
}

fn crossing_number_extraction() -> Check {
    let mut line = Array2::zeros((40, 60));
    for x in 15..45 {
        line[[20, x]] = 1.0;
    }
    let k = kinds(&ok(extract_minutiae(&line))?);
    ensure!(k == (2, 0), "line gives {k:?} (endings, bifurcations), expected (2, 0)");

    let mut tee = Array2::zeros((50, 50));
    for x in 12..38 {
        tee[[15, x]] = 1.0;
    }
    for y in 15..38 {
        tee[[y, 25]] = 1.0;
    }
    let k = kinds(&ok(extract_minutiae(&tee))?);
    ensure!(k.1 == 1, "T-junction gives {} bifurcations", k.1);

    let base = kinds(&ok(extract_minutiae(&parallel_ridges(None)))?);
    let broken = kinds(&ok(extract_minutiae(&parallel_ridges(Some(4))))?);
    ensure!(
        broken.0 == base.0 + 2 && broken.1 == base.1,
        "ridge break: {base:?} -> {broken:?}, expected exactly two more endings"
    );

    let toy = ToyCorpusConfig { n_fingers: 10, impressions: 2, size: 160, seed: 31, ..Default::default() };
    let mut images = 0;
    let mut total = 0;
    for (_, gray) in toy_images(&toy) {
        let ridges = classical_binarize(&gray);
        let (m, skeleton) = ok(extract_minutiae_with(&ridges, &ExtractConfig::default(), None))?;
        let (e, b) = kinds(&m);
        ensure!(e + b == m.len(), "total {} != {e} + {b}", m.len());
        for p in &m {
            let cn = crossing_number(&skeleton, p.y, p.x);
            let want = if p.kind == MinutiaKind::Ending { 1 } else { 3 };
            ensure!(cn == want, "{:?} at ({}, {}) has crossing number {cn}", p.kind, p.x, p.y);
        }
        images += 1;
        total += m.len();
    }
    Ok(format!(
        "line (2, 0), T-junction 1 bifurcation, break {base:?} -> {broken:?}; {images} toy images, {total} minutiae all consistent"
    ))
}

// 7 ----------------------------------------------------------------------

fn stats_protocol() -> Check {
    let dir = ok(tempfile::tempdir())?;
    let cfg = ToyCorpusConfig { n_fingers: 6, impressions: 2, size: 160, seed: 8, ..Default::default() };
    let ds = ok(write_toy_corpus(&dir.path().join("toy"), &cfg))?;
    let stats = ok(fingerprint_stats(&ds, &ClassicalBinarizer::default()))?;
    let path = dir.path().join("stats.csv");
    ok(write_stats_table(&path, &stats))?;
    let mut reader = ok(csv::Reader::from_path(&path))?;
    let names: Vec<String> = reader.records().map(|r| r.map(|r| r[0].to_string())).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    for row in STATS_ROWS.iter().chain([&PER_MP_ROW]) {
        ensure!(names.iter().any(|n| n == row), "missing row {row:?} in {names:?}");
    }
    let (v, degenerate) = minutiae_per_megapixel(40.45, 0.68);
    ensure!(!degenerate && (v - 59.49).abs() <= 0.005, "40.45 / 0.68 = {v}");
    Ok(format!("{} rows present; 40.45 / 0.68 = {v:.4} (59.49 +- 0.005)", STATS_ROWS.len() + 1))
}

// 8 ----------------------------------------------------------------------

fn mean_of<T>(rows: &[T], f: impl Fn(&T) -> f64) -> f64 {
    rows.iter().map(f).sum::<f64>() / rows.len() as f64
}

fn ols_slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    let mx = (n - 1.0) / 2.0;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, y) in ys.iter().enumerate() {
        let dx = i as f64 - mx;
        sxy += dx * (y - my);
        sxx += dx * dx;
    }
    sxy / sxx
}

fn smoke_training() -> Check {
    let t0 = Instant::now();
    let mut notes = Vec::new();

    // (a) master-print GAN
    let toy = ToyCorpusConfig { n_fingers: 32, impressions: 2, size: 128, ..Default::default() };
    let targets: Vec<_> = toy_images(&toy).iter().map(|(_, g)| master_target(g, 64)).collect();
    ensure!(targets.len() == 64, "{} GAN targets", targets.len());
    let mut gan = ok(MasterPrintGan::new(GanConfig::small(64), 7))?;
    let log = ok(train_gan_on_images(&mut gan, &targets, &GanTrainConfig { steps: 300, ..Default::default() }))?;
    let (first, last) = (mean_of(&log[..100], |r| r.loss_d), mean_of(&log[log.len() - 100..], |r| r.loss_d));
    ensure!(last < first, "(a) loss_D first-100 {first:.4}, last-100 {last:.4}");
    notes.push(format!("(a) loss_D {first:.3} -> {last:.3}"));

    // (b) binarizer on 200 teacher pairs
    let pairs = |n_fingers: usize, seed: u64| -> Vec<BinaryPair> {
        let cfg = ToyCorpusConfig { n_fingers, impressions: 2, size: 128, seed, ..Default::default() };
        toy_images(&cfg).into_iter().map(|(_, gray)| BinaryPair { binary: classical_binarize(&gray), gray }).collect()
    };
    let train = pairs(100, 11);
    let held_out = pairs(10, 12);
    ensure!(train.len() == 200, "{} binarizer pairs", train.len());
    let mut binarizer = ok(LearnedBinarizer::new(BinarizerConfig::default(), 5))?;
    ok(train_binarizer(&mut binarizer, &train, &BinarizerTrainConfig { steps: 500, ..Default::default() }))?;
    let mut acc = 0.0;
    for p in &held_out {
        acc += pixel_accuracy(&ok(binarizer.binarize(&p.gray))?, &p.binary);
    }
    let acc = acc / held_out.len() as f64;
    ensure!(acc >= 0.90, "(b) held-out pixel accuracy {acc:.4} < 0.90");
    notes.push(format!("(b) accuracy {acc:.4}"));

    // (c) renderer, 500 steps
    let embedder = ok(LearnedEmbedder::new(EmbedderConfig { input_size: 128, ..Default::default() }, 2))?;
    let model_cfg = RendererConfig::small(64, 128);
    let toy = ToyCorpusConfig { n_fingers: 32, impressions: 2, size: 128, seed: 41, ..Default::default() };
    let rpairs: Vec<_> = toy_images(&toy).iter().map(|(_, g)| render_pair(g, &model_cfg)).collect();
    let mut renderer = ok(Renderer::new(model_cfg, "live", 5))?;
    let log = ok(train_renderer_on(&mut renderer, &rpairs, &embedder, &binarizer, &RendererTrainConfig::default(), 500))?;
    ensure!(log.len() == 500, "{} renderer steps logged", log.len());
    let li: Vec<f64> = log.iter().map(|r| r.l_i).collect();
    let (first, last) = (mean_of(&li[..100], |v| *v), mean_of(&li[400..], |v| *v));
    let slope = ols_slope(&li);
    ensure!(last < first && slope < 0.0, "(c) L_i first-100 {first:.3}, last-100 {last:.3}, slope {slope:e}");
    notes.push(format!("(c) L_i {first:.2} -> {last:.2}, slope {slope:.3e}"));

    // (d) detector on a separable corpus
    let cfg = ToyCorpusConfig {
        n_fingers: 50,
        impressions: 2,
        size: 128,
        seed: 17,
        materials: vec![MaterialLabel::live(), ok(MaterialLabel::new("ecoflex"))?],
        ..Default::default()
    };
    let mut samples: Vec<_> = toy_images(&cfg)
        .into_iter()
        .map(|(r, image)| DetectorSample { minutiae: detect_minutiae(&image), image, spoof: !r.is_live, validation: false })
        .collect();
    hold_out(&mut samples, 0.2, 3);
    let mut det = ok(SpoofDetector::new(DetectorConfig::default(), 1))?;
    let tcfg = DetectorTrainConfig { steps: 200, ..Default::default() };
    let whole = ok(train_detector(&mut det, &samples, Branch::Whole, &tcfg))?.validation_accuracy.unwrap_or(0.0);
    let patch = ok(train_detector(&mut det, &samples, Branch::Patch, &tcfg))?.validation_accuracy.unwrap_or(0.0);
    let fusion = FusionConfig::default();
    let val: Vec<_> = samples.iter().filter(|s| s.validation).collect();
    let mut hits = 0;
    for s in &val {
        hits += ((ok(det.spoof_score(&fusion, &s.image, &s.minutiae))? >= 0.5) == s.spoof) as usize;
    }
    let fused = hits as f64 / val.len() as f64;
    ensure!(
        whole >= 0.9 && patch >= 0.9 && fused >= 0.9,
        "(d) validation accuracy whole {whole:.3}, patch {patch:.3}, fused {fused:.3} (need 0.9)"
    );
    notes.push(format!("(d) accuracy whole {whole:.3} patch {patch:.3} fused {fused:.3}"));

    let secs = t0.elapsed().as_secs_f64();
    ensure!(secs < 1800.0, "took {secs:.0}s (limit 1800s); {}", notes.join(", "));
    Ok(notes.join(", "))
}

// 9 ----------------------------------------------------------------------

fn generation_determinism() -> Check {
    let dir = ok(tempfile::tempdir())?;
    let names = ["live", "ecoflex"];
    let ckpt: CheckpointPaths =
        common::write_checkpoints(&dir.path().join("ckpt"), GanConfig::default(), RendererConfig::default(), &names);
    let run = |out: &str| -> Result<(GenerationConfig, Dataset), String> {
        let cfg = GenerationConfig::new(2, 3, common::materials(&names), 2024, ckpt.clone(), dir.path().join(out));
        let ds = ok(generate_dataset(&cfg))?;
        Ok((cfg, ds))
    };
    let (cfg, a) = run("a")?;
    let (cfg_b, b) = run("b")?;
    ensure!(a.len() == 12 && b.len() == 12, "{} and {} images", a.len(), b.len());
    let pngs = a.records().iter().filter(|r| a.path_of(r).is_file()).count();
    ensure!(pngs == 12, "{pngs} image files on disk");
    let (fa, fb) = (common::files_under(&cfg.output_root), common::files_under(&cfg_b.output_root));
    ensure!(fa.len() == fb.len(), "{} vs {} files", fa.len(), fb.len());
    for ((pa, ba), (pb, bb)) in fa.iter().zip(&fb) {
        ensure!(pa == pb && ba == bb, "{pa} differs between runs");
    }
    ensure!(read_manifest(&cfg.output_root.join(MANIFEST_FILE)).map_err(|e| e.to_string())? == a.records(), "manifest");

    // every material of an impression is a render of the same stored warped binary
    let log: forge_pipeline::generate::GenerationLog =
        ok(serde_json::from_slice(&ok(std::fs::read(cfg.output_root.join(GENERATION_LOG)))?))?;
    let stages = ok(Stages::load(&cfg))?;
    let mut checked = 0;
    for imp in &log.impressions {
        let warped = ok(read_gray(&cfg.output_root.join(&imp.warped_path)))?;
        ensure!(is_binary(&warped), "{} is not binary", imp.warped_path.display());
        let mats: BTreeSet<&str> = imp.renders.iter().map(|r| r.material.as_str()).collect();
        ensure!(mats.len() == 2, "{} renders for {}_{}", mats.len(), imp.finger_id, imp.impression_id);
        for r in &imp.renders {
            let renderer = &stages.renderers[&r.material];
            let z = sample_texture_latent(r.texture_seed, renderer.config.texture_dim);
            let again = ok(renderer.render_texture(&warped, &z))?;
            let stored = ok(read_gray(&cfg.output_root.join(&r.image_path)))?;
            ensure!(to_luma(&again) == to_luma(&stored), "{} is not a render of its warped binary", r.image_path.display());
            checked += 1;
        }
    }
    // resuming over a complete output renders nothing and changes nothing
    let g = ok(generate_with(&cfg, &stages))?;
    ensure!(g.rendered == 0 && common::files_under(&cfg.output_root) == fa, "rerun changed the output");
    Ok(format!("12 images, {} files byte-identical across runs, {checked} renders traced to shared warps", fa.len()))
}

// 10 ---------------------------------------------------------------------

fn leakage_audit() -> Check {
    let dir = ok(tempfile::tempdir())?;
    let train_cfg = ToyCorpusConfig { n_fingers: 8, impressions: 2, size: 128, seed: 50, ..Default::default() };
    let training = ok(write_toy_corpus(&dir.path().join("train"), &train_cfg))?;
    let syn_cfg = ToyCorpusConfig {
        n_fingers: 6,
        seed: 51,
        domain: ToyDomain::Synthetic,
        finger_prefix: "syn".into(),
        ..train_cfg
    };
    let syn_root = dir.path().join("syn");
    let syn = ok(write_toy_corpus(&syn_root, &syn_cfg))?;

    // plant a copy of one training image
    let source = &training.records()[5];
    let img = ok(training.load_image(source))?;
    let mut planted = source.clone();
    planted.finger_id = "planted".into();
    planted.image_path = "live/planted_0.png".into();
    ok(write_gray(&syn_root.join(&planted.image_path), &img))?;
    let mut records = syn.records().to_vec();
    records.push(planted.clone());
    ok(write_manifest(&syn_root.join(MANIFEST_FILE), &records))?;
    let syn = ok(Dataset::new(&syn_root, records))?;

    let report = ok(leakage_check(&syn, &training, &ProjectionEmbedder::new(0), 0.99))?;
    let want = (syn.len() * training.len()) as u64;
    ensure!(report.total_comparisons == want, "{} comparisons, expected {want}", report.total_comparisons);
    let (pk, sk) = (planted.key().to_string(), source.key().to_string());
    let hit = report.pairs.iter().find(|p| p.synthetic == pk && p.training == sk);
    let Some(hit) = hit else { return Err(format!("planted pair not flagged; {} flagged", report.pairs.len())) };
    ensure!(hit.score == 1.0, "planted pair scored {}", hit.score);
    Ok(format!(
        "planted pair flagged at score {}, {} flagged pairs total, {} = {} x {} comparisons",
        hit.score,
        report.pairs.len(),
        report.total_comparisons,
        syn.len(),
        training.len()
    ))
}

// 11 ---------------------------------------------------------------------

fn experiment_shape() -> Check {
    let dir = ok(tempfile::tempdir())?;
    let mats = vec![MaterialLabel::live(), ok(MaterialLabel::new("ecoflex"))?];
    let real_cfg = ToyCorpusConfig {
        n_fingers: 24,
        impressions: 2,
        materials: mats.clone(),
        size: 128,
        seed: 60,
        test_fraction: 0.25,
        ..Default::default()
    };
    let real = ok(write_toy_corpus(&dir.path().join("real"), &real_cfg))?;
    let syn_cfg = ToyCorpusConfig {
        n_fingers: 24,
        seed: 61,
        domain: ToyDomain::Synthetic,
        finger_prefix: "syn".into(),
        test_fraction: 0.0,
        ..real_cfg.clone()
    };
    let synthetic = ok(write_toy_corpus(&dir.path().join("syn"), &syn_cfg))?;
    let eval = EvalSet {
        name: "real_test".into(),
        dataset: real.filter(|r| r.split == forge_core::dataset::Split::Test),
    };
    let mut cfg = ExperimentConfig {
        detector: DetectorConfig { whole_input: 64, max_patches: 8, channels: vec![8, 16, 16], ..Default::default() },
        seed: 5,
        ..Default::default()
    };
    cfg.train.steps = 150;
    let results = ok(run_augmentation_experiment(&real, &synthetic, std::slice::from_ref(&eval), &cfg))?;
    let out = dir.path().join("exp");
    ok(results.write_all(&out))?;

    let mut reader = ok(csv::Reader::from_path(out.join("results.csv")))?;
    let header: Vec<String> = ok(reader.headers())?.iter().map(String::from).collect();
    ensure!(header == RESULTS_HEADER, "results.csv header {header:?}");

    let table = results.composition_table();
    let rows: Vec<Composition> = table.iter().map(|(c, _)| *c).collect();
    let all: BTreeSet<Composition> = Composition::ALL.into_iter().collect();
    ensure!(rows.len() == 4 && rows.iter().copied().collect::<BTreeSet<_>>() == all, "composition rows {rows:?}");
    let table_csv = ok(std::fs::read_to_string(out.join("composition_table.csv")))?;
    ensure!(table_csv.lines().count() == 5, "composition_table.csv has {} lines", table_csv.lines().count());

    let fractions = [0.0, 25.0, 50.0, 75.0, 100.0];
    for c in Composition::ALL {
        for f in fractions {
            let present = results.get(c, f, "real_test").is_some();
            let skipped = results.skipped.iter().find(|s| s.composition == c && s.real_fraction == f);
            ensure!(present || skipped.is_some(), "{c} at {f}% neither evaluated nor skipped");
            if let Some(s) = skipped {
                ensure!(!s.reason.is_empty(), "{c} at {f}% skipped without a reason");
            }
        }
    }
    let real_only_zero = results.skipped.iter().any(|s| s.composition == Composition::RealOnly && s.real_fraction == 0.0);
    ensure!(real_only_zero, "real_only at 0% was not skipped");
    let sweep = ok(std::fs::read_to_string(out.join("varying_percent.csv")))?;
    ensure!(sweep.lines().count() == 1 + 4 * 5, "varying_percent.csv has {} lines", sweep.lines().count());

    let tdr = |c| results.get(c, 100.0, "real_test").map(|r| r.tdr);
    let (Some(rs), Some(so)) = (tdr(Composition::RealSynthetic), tdr(Composition::SyntheticOnly)) else {
        let reasons: Vec<String> = results.skipped.iter().map(|s| format!("{}@{}: {}", s.composition, s.real_fraction, s.reason)).collect();
        return Err(format!("missing 100% cells; skipped {reasons:?}"));
    };
    ensure!(rs >= so, "TDR real+synthetic {rs:.4} < synthetic-only {so:.4}");
    Ok(format!("4 compositions x 5 fractions; TDR@0.2% real+synthetic {rs:.4} >= synthetic-only {so:.4}"))
}

fn main() -> ExitCode {
    let criteria: [(u32, &str, fn() -> Check); 11] = [
        (1, "deformation_model", deformation_model),
        (2, "pose_sampling", pose_sampling),
        (3, "warp_invariants", warp_invariants),
        (4, "loss_arithmetic", loss_arithmetic),
        (5, "metric_oracles", metric_oracles),
        (6, "crossing_number_extraction", crossing_number_extraction),
        (7, "stats_protocol", stats_protocol),
        (8, "smoke_training", smoke_training),
        (9, "generation_determinism", generation_determinism),
        (10, "leakage_audit", leakage_audit),
        (11, "experiment_shape", experiment_shape),
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    let mut ran = 0;
    for (n, name, f) in criteria {
        if !filters.is_empty() && !filters.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        ran += 1;
        let t = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = t.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("[PASS] {n} {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] {n} {name} ({secs:.1}s): {detail}");
            }
        }
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
