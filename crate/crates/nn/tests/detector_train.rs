use std::time::Instant;

use forge_core::material::MaterialLabel;
use forge_core::pad::FusionConfig;
use forge_core::toy::{toy_images, ToyCorpusConfig};
use forge_nn::detector::{
    detect_minutiae, hold_out, train_detector, Branch, DetectorConfig, DetectorSample, DetectorTrainConfig, SpoofDetector,
};

fn separable_corpus() -> Vec<DetectorSample> {
    let cfg = ToyCorpusConfig {
        n_fingers: 50,
        impressions: 2,
        size: 128,
        seed: 17,
        materials: vec![MaterialLabel::live(), MaterialLabel::new("ecoflex").unwrap()],
        ..Default::default()
    };
    let mut samples: Vec<_> = toy_images(&cfg)
        .into_iter()
        .map(|(r, image)| DetectorSample { minutiae: detect_minutiae(&image), image, spoof: !r.is_live, validation: false })
        .collect();
    hold_out(&mut samples, 0.2, 3);
    samples
}

#[test]
fn both_branches_separate_toy_live_from_spoof() {
    let samples = separable_corpus();
    assert_eq!(samples.iter().filter(|s| s.spoof).count(), 100);
    let mut det = SpoofDetector::new(DetectorConfig::default(), 1).unwrap();
    let cfg = DetectorTrainConfig { steps: 200, ..Default::default() };
    let t = Instant::now();
    let whole = train_detector(&mut det, &samples, Branch::Whole, &cfg).unwrap();
    let patch = train_detector(&mut det, &samples, Branch::Patch, &cfg).unwrap();
    eprintln!(
        "detector: {:.1}s whole acc {:?} ({} val), patch acc {:?} ({} val)",
        t.elapsed().as_secs_f64(),
        whole.validation_accuracy,
        whole.validation_inputs,
        patch.validation_accuracy,
        patch.validation_inputs
    );
    assert!(whole.validation_accuracy.unwrap() >= 0.9);
    assert!(patch.validation_accuracy.unwrap() >= 0.9);

    let fusion = FusionConfig::default();
    let val: Vec<_> = samples.iter().filter(|s| s.validation).collect();
    let hits = val
        .iter()
        .filter(|s| (det.spoof_score(&fusion, &s.image, &s.minutiae).unwrap() >= 0.5) == s.spoof)
        .count();
    assert!(hits as f64 / val.len() as f64 >= 0.9);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("det.safetensors");
    det.save(&path).unwrap();
    let back = SpoofDetector::load(&path).unwrap();
    assert_eq!(back.digest().unwrap(), det.digest().unwrap());
    let s = &val[0];
    assert_eq!(back.spoof_score(&fusion, &s.image, &s.minutiae).unwrap(), det.spoof_score(&fusion, &s.image, &s.minutiae).unwrap());
}

#[test]
fn fixed_seed_reproduces_weights() {
    let samples = separable_corpus();
    let run = || {
        let mut det = SpoofDetector::new(DetectorConfig::default(), 4).unwrap();
        train_detector(&mut det, &samples, Branch::Whole, &DetectorTrainConfig { steps: 10, ..Default::default() }).unwrap();
        det.digest().unwrap()
    };
    assert_eq!(run(), run());
}
