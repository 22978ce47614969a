#![allow(dead_code)]

use std::path::Path;

use forge_core::material::MaterialLabel;
use forge_nn::gan::{GanConfig, MasterPrintGan};
use forge_nn::renderer::{Renderer, RendererConfig};
use forge_pipeline::config::CheckpointPaths;
use forge_pipeline::GenerationConfig;

pub fn materials(names: &[&str]) -> Vec<MaterialLabel> {
    names.iter().map(|n| MaterialLabel::new(n).unwrap()).collect()
}

/// Untrained, seeded checkpoints: a master-print GAN and one renderer per material.
pub fn write_checkpoints(dir: &Path, gan: GanConfig, renderer: RendererConfig, names: &[&str]) -> CheckpointPaths {
    std::fs::create_dir_all(dir).unwrap();
    let masterprint = dir.join("masterprint.safetensors");
    MasterPrintGan::new(gan, 3).unwrap().save(&masterprint).unwrap();
    let renderers = names
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let p = dir.join(format!("renderer_{m}.safetensors"));
            Renderer::new(renderer.clone(), m, 10 + i as u64).unwrap().save(&p).unwrap();
            (m.to_string(), p)
        })
        .collect();
    CheckpointPaths { masterprint, renderers, lineage: None, basis: None }
}

/// Small models (64 -> 128) for fast pipeline tests.
pub fn small_generation(dir: &Path, n: usize, k: usize, names: &[&str], seed: u64) -> GenerationConfig {
    let ckpt = write_checkpoints(&dir.join("ckpt"), GanConfig::small(64), RendererConfig::small(64, 128), names);
    GenerationConfig::new(n, k, materials(names), seed, ckpt, dir.join("out"))
}

pub fn files_under(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/");
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}
