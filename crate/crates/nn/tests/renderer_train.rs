use std::time::Instant;

use forge_core::binarize::classical_binarize;
use forge_core::material::MaterialLabel;
use forge_core::toy::{toy_images, write_toy_corpus, ToyCorpusConfig};
use forge_nn::binarizer::{train_binarizer, BinarizerConfig, BinarizerTrainConfig, BinaryPair, LearnedBinarizer};
use forge_nn::embedder::{EmbedderConfig, LearnedEmbedder};
use forge_nn::renderer::{
    render_pair, train_renderer, train_renderer_on, train_renderer_schedule, RenderScope, Renderer, RendererConfig,
    RendererTrainConfig,
};
use forge_nn::TrainError;

fn quick_binarizer() -> LearnedBinarizer {
    let cfg = ToyCorpusConfig { n_fingers: 16, impressions: 2, size: 128, seed: 40, ..Default::default() };
    let pairs: Vec<_> =
        toy_images(&cfg).into_iter().map(|(_, g)| BinaryPair { binary: classical_binarize(&g), gray: g }).collect();
    let mut b = LearnedBinarizer::new(BinarizerConfig::default(), 1).unwrap();
    train_binarizer(&mut b, &pairs, &BinarizerTrainConfig { steps: 150, ..Default::default() }).unwrap();
    b
}

#[test]
fn pixel_loss_trends_down_over_500_steps() {
    let binarizer = quick_binarizer();
    let embedder = LearnedEmbedder::new(EmbedderConfig { input_size: 128, ..Default::default() }, 2).unwrap();
    let model_cfg = RendererConfig::small(64, 128);
    let toy = ToyCorpusConfig { n_fingers: 32, impressions: 2, size: 128, seed: 41, ..Default::default() };
    let pairs: Vec<_> = toy_images(&toy).iter().map(|(_, g)| render_pair(g, &model_cfg)).collect();
    let mut model = Renderer::new(model_cfg, "live", 5).unwrap();
    let t = Instant::now();
    let log = train_renderer_on(&mut model, &pairs, &embedder, &binarizer, &RendererTrainConfig::default(), 500).unwrap();
    let mean = |r: &[forge_nn::renderer::RendererLossRow]| r.iter().map(|x| x.l_i).sum::<f64>() / r.len() as f64;
    let (first, last) = (mean(&log[..100]), mean(&log[400..]));
    eprintln!("renderer smoke: {:.1}s L_i first-100 {first:.2} last-100 {last:.2}", t.elapsed().as_secs_f64());
    assert!(last < first);
}

#[test]
fn schedule_produces_branch_and_material_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let lives = ToyCorpusConfig { n_fingers: 32, impressions: 2, size: 64, seed: 1, ..Default::default() };
    let spoofs = ToyCorpusConfig {
        n_fingers: 8,
        impressions: 2,
        size: 64,
        seed: 2,
        materials: vec![MaterialLabel::new("ecoflex").unwrap(), MaterialLabel::new("gelatine").unwrap()],
        finger_prefix: "sp".into(),
        ..Default::default()
    };
    // both corpora under one root; image paths are disjoint by material directory
    let root = dir.path().join("data");
    let a = write_toy_corpus(&root, &lives).unwrap();
    let b = write_toy_corpus(&root, &spoofs).unwrap();
    let records = a.records().iter().chain(b.records()).cloned().collect();
    let ds = forge_core::Dataset::new(&root, records).unwrap();
    assert_eq!(ds.records().iter().filter(|r| r.is_live).count(), 64);
    assert_eq!(ds.records().iter().filter(|r| !r.is_live).count(), 32);

    let binarizer = LearnedBinarizer::new(BinarizerConfig::default(), 1).unwrap();
    let embedder = LearnedEmbedder::new(EmbedderConfig { input_size: 128, ..Default::default() }, 2).unwrap();
    let model_cfg = RendererConfig::small(32, 64);
    let cfg = RendererTrainConfig { steps: 3, batch: 8, ..Default::default() };
    let out = dir.path().join("ckpt");
    let (lineage, logs) = train_renderer_schedule(&ds, &embedder, &binarizer, &model_cfg, &cfg, &out).unwrap();
    let tags: Vec<_> = lineage.entries.iter().map(|e| e.material.as_str()).collect();
    assert_eq!(tags, ["pretrain", "live", "all_spoof", "ecoflex", "gelatine"]);
    let id = |m: &str| lineage.get(m).unwrap().id.clone();
    assert_eq!(lineage.get("live").unwrap().parent, Some(id("pretrain")));
    assert_eq!(lineage.get("all_spoof").unwrap().parent, Some(id("pretrain")));
    assert_eq!(lineage.get("ecoflex").unwrap().parent, Some(id("all_spoof")));
    assert_eq!(lineage.get("gelatine").unwrap().parent, Some(id("all_spoof")));
    // three epochs over 16 records in batches of 8
    assert_eq!(logs.iter().find(|(m, _)| m == "ecoflex").unwrap().1.len(), 6);
    let reloaded = Renderer::load(&lineage.get("ecoflex").unwrap().path).unwrap();
    assert_eq!(reloaded.parent, Some(id("all_spoof")));
    assert_eq!(reloaded.id().unwrap(), id("ecoflex"));
    assert_eq!(forge_nn::renderer::Lineage::load(&out.join("lineage.json")).unwrap(), lineage);

    let scope = RenderScope::Material(MaterialLabel::new("ecoflex").unwrap());
    let err = train_renderer(&ds, None, &scope, &embedder, &binarizer, &model_cfg, &cfg).err().unwrap();
    assert!(matches!(err, TrainError::Lineage(_)));
    let parent = Renderer::load(&lineage.get("all_spoof").unwrap().path).unwrap();
    let scope = RenderScope::Material(MaterialLabel::new("latex").unwrap());
    let err = train_renderer(&ds, Some(&parent), &scope, &embedder, &binarizer, &model_cfg, &cfg).err().unwrap();
    assert!(matches!(err, TrainError::EmptyMaterial(_)));
}
