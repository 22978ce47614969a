use std::path::Path;

use forge_core::dataset::Split;
use forge_nn::experiment::Composition;
use forge_pipeline::{PipelineConfig, PipelineError};

const FULL: &str = r#"
[generation]
n_fingers = 4
impressions_per_finger = 3
materials = ["live", "ecoflex"]
root_seed = 42
output_root = "out/syn"

[generation.checkpoints]
masterprint = "ckpt/gan.safetensors"
renderers = { live = "ckpt/live.safetensors", ecoflex = "/abs/ecoflex.safetensors" }

[report]
real = { root = "data/real", split = "test" }
synthetic = { root = "out/syn" }
out_dir = "report"
far_targets = [0.001]

[experiment]
real = { root = "data/real" }
synthetic = { root = "out/syn" }
out_dir = "exp"
compositions = ["synthetic_only", "real+synthetic"]
real_fractions = [0, 50, 100]
steps = 20

[[experiment.eval]]
name = "held_out"
root = "data/real"
split = "test"
"#;

#[test]
fn relative_paths_resolve_against_the_config_directory() {
    let base = Path::new("/runs/a");
    let cfg = PipelineConfig::from_toml(FULL, base).unwrap();
    let g = cfg.generation().unwrap();
    assert_eq!(g.output_root, base.join("out/syn"));
    assert_eq!(g.checkpoints.masterprint, base.join("ckpt/gan.safetensors"));
    assert_eq!(g.checkpoints.renderers["live"], base.join("ckpt/live.safetensors"));
    assert_eq!(g.checkpoints.renderers["ecoflex"], Path::new("/abs/ecoflex.safetensors"));
    assert_eq!(g.sigma_c, 0.66);
    assert_eq!(g.finger_prefix, "syn");
    g.validate().unwrap();

    let r = cfg.report().unwrap();
    assert_eq!(r.real.root, base.join("data/real"));
    assert_eq!(r.real.split, Some(Split::Test));
    assert_eq!(r.out_dir, base.join("report"));
    assert_eq!(r.far_targets, [0.001]);

    let x = cfg.experiment().unwrap();
    assert_eq!(x.eval[0].root, base.join("data/real"));
    assert_eq!(x.compositions, [Composition::SyntheticOnly, Composition::RealSynthetic]);
    let ec = x.experiment_config();
    assert_eq!(ec.real_fractions, [0.0, 50.0, 100.0]);
    assert_eq!(ec.train.steps, 20);
    assert_eq!(ec.fdr, 0.002);
}

#[test]
fn defaults_fill_optional_sections() {
    let text = "[report]\nreal = { root = \"r\" }\nsynthetic = { root = \"s\" }\nout_dir = \"o\"\n";
    let cfg = PipelineConfig::from_toml(text, Path::new("/x")).unwrap();
    let r = cfg.report().unwrap();
    assert_eq!(r.far_targets, [1e-4, 1e-3, 1e-2]);
    assert!(r.embedder.is_none() && r.leakage_threshold.is_none());
    assert!(matches!(cfg.generation(), Err(PipelineError::Config(_))));
    let x = PipelineConfig::from_toml(
        "[experiment]\nreal = { root = \"r\" }\nsynthetic = { root = \"s\" }\nout_dir = \"o\"\neval = []\n",
        Path::new("/x"),
    )
    .unwrap();
    let x = x.experiment().unwrap();
    assert_eq!(x.compositions.len(), 4);
    assert_eq!(x.real_fractions, [0.0, 25.0, 50.0, 75.0, 100.0]);
}

#[test]
fn unknown_keys_and_bad_materials_are_rejected() {
    let base = Path::new("/x");
    for text in [
        "[report]\nreal = { root = \"r\" }\nsynthetic = { root = \"s\" }\nout_dir = \"o\"\ntypo = 1\n",
        "[nonsense]\n",
        &FULL.replace("\"ecoflex\"]", "\"eco/flex\"]"),
    ] {
        assert!(matches!(PipelineConfig::from_toml(text, base), Err(PipelineError::Config(_))), "{text}");
    }
}

#[test]
fn load_uses_the_file_directory() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(&path, FULL).unwrap();
    let cfg = PipelineConfig::load(&path).unwrap();
    assert_eq!(cfg.generation().unwrap().output_root, dir.path().join("out/syn"));
    assert!(matches!(PipelineConfig::load(&dir.path().join("nope.toml")), Err(PipelineError::Io { .. })));
}
