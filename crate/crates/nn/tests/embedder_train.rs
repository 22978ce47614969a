use std::time::Instant;

use forge_core::matching::{match_score, Embedder};
use forge_core::toy::{toy_images, ToyCorpusConfig};
use forge_nn::embedder::{train_embedder_on, EmbedderConfig, EmbedderTrainConfig, LearnedEmbedder};

#[test]
fn genuine_pairs_score_above_imposters_after_training() {
    let toy = |n, seed| -> Vec<(String, forge_core::GrayImage)> {
        let cfg = ToyCorpusConfig { n_fingers: n, impressions: 3, size: 128, seed, ..Default::default() };
        toy_images(&cfg).into_iter().map(|(r, g)| (r.finger_id, g)).collect()
    };
    let train = toy(16, 21);
    let mut model = LearnedEmbedder::new(EmbedderConfig { input_size: 128, ..Default::default() }, 3).unwrap();
    let t = Instant::now();
    let cfg = EmbedderTrainConfig { steps: 300, ..Default::default() };
    train_embedder_on(&mut model, &train, &cfg).unwrap();

    // fresh identities
    let test = toy(6, 22);
    let embs: Vec<_> = test.iter().map(|(f, g)| (f, model.embed(g))).collect();
    let (mut gen, mut imp) = (Vec::new(), Vec::new());
    for i in 0..embs.len() {
        for j in i + 1..embs.len() {
            let s = match_score(&embs[i].1, &embs[j].1).unwrap();
            if embs[i].0 == embs[j].0 { gen.push(s) } else { imp.push(s) }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    eprintln!("embedder: {:.1}s genuine {:.3} imposter {:.3}", t.elapsed().as_secs_f64(), mean(&gen), mean(&imp));
    assert!(mean(&gen) > mean(&imp));
}
