use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use forge_core::binarize::{ClassicalBinarizer, RidgeBinarizer};
use forge_core::dataset::Dataset;
use forge_core::image::{read_gray, write_gray};
use forge_core::material::MaterialLabel;
use forge_core::matching::{leakage_check, score_distributions, Embedder, Pairing, ProjectionEmbedder, DEFAULT_IMPOSTER_CAP};
use forge_core::metrics::tar_at_far;
use forge_core::minutiae::{fingerprint_stats, write_stats_table};
use forge_core::toy::{write_toy_corpus, ToyCorpusConfig, ToyDomain};
use forge_core::warp::synthesize_basis;
use forge_nn::binarizer::{teacher_pairs, train_binarizer, BinarizerConfig, BinarizerTrainConfig, LearnedBinarizer};
use forge_nn::detector::{detector_samples, train_detector, Branch, DetectorConfig, DetectorTrainConfig, SpoofDetector};
use forge_nn::embedder::{train_embedder, EmbedderConfig, EmbedderTrainConfig, LearnedEmbedder};
use forge_nn::gan::{train_masterprint_gan, GanConfig, GanTrainConfig, MasterPrintGan};
use forge_nn::renderer::{train_renderer, train_renderer_schedule, RenderScope, Renderer, RendererConfig, RendererTrainConfig};
use forge_pipeline::config::{DatasetRef, PipelineConfig};
use forge_pipeline::generate::{generate_with, Stages};
use forge_pipeline::{replicate_eval_protocol, run_experiment, PipelineError, Result};
use serde_json::json;

#[derive(Parser)]
#[command(name = "forge", version, about = "Synthetic live and spoof fingerprint generation and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Deformation basis utilities.
    Basis {
        #[command(subcommand)]
        command: BasisCommand,
    },
    /// Write a procedural toy corpus with a manifest.
    Toy(ToyArgs),
    #[command(subcommand)]
    Train(TrainCommand),
    /// Generate a dataset from the [generation] section of a config file.
    Generate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Minutiae statistics table for one dataset.
    Stats {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        binarizer: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    #[command(subcommand)]
    Eval(EvalCommand),
    #[command(subcommand)]
    Experiment(ExperimentCommand),
    /// Full evaluation bundle from the [report] section of a config file.
    Report {
        #[arg(long)]
        config: PathBuf,
    },
    /// Binarize one image with a learned (or the classical) binarizer.
    Binarize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        binarizer: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum BasisCommand {
    /// Synthesize a smooth orthonormal basis.
    Synth {
        #[arg(long, default_value_t = 16)]
        grid: usize,
        #[arg(long, default_value_t = 6)]
        t: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Domain {
    Real,
    Synthetic,
}

#[derive(Args)]
struct ToyArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    fingers: usize,
    #[arg(long, default_value_t = 2)]
    impressions: usize,
    #[arg(long, value_delimiter = ',', default_value = "live")]
    materials: Vec<String>,
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Domain::Real)]
    domain: Domain,
    #[arg(long, default_value = "toy")]
    prefix: String,
    #[arg(long, default_value_t = 0.0)]
    test_fraction: f64,
}

#[derive(Args)]
struct DataArgs {
    /// Dataset root.
    #[arg(long)]
    data: PathBuf,
    /// Manifest path; `<data>/manifest.csv` by default.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

impl DataArgs {
    fn load(&self) -> Result<Dataset> {
        DatasetRef { root: self.data.clone(), manifest: self.manifest.clone(), split: None }.load()
    }
}

#[derive(Subcommand)]
enum TrainCommand {
    /// Master-print GAN on live impressions.
    Masterprint {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 256)]
        resolution: usize,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        losses: Option<PathBuf>,
    },
    /// Binarizer on classical teacher pairs.
    Binarizer {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        losses: Option<PathBuf>,
    },
    /// Identity embedder used by the identity loss and matching.
    Embedder {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        losses: Option<PathBuf>,
    },
    /// Renderer schedule (pretrain, live, all-spoof, per material) or one tier.
    Renderer {
        #[command(flatten)]
        data: DataArgs,
        /// Output directory of the schedule; with --scope, the checkpoint file.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        embedder: PathBuf,
        #[arg(long)]
        binarizer: PathBuf,
        /// Train a single tier: pretrain, live, all_spoof or a spoof material.
        #[arg(long)]
        scope: Option<String>,
        /// Parent checkpoint for a single tier.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long, default_value_t = 256)]
        in_size: usize,
        #[arg(long, default_value_t = 512)]
        out_size: usize,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        losses: Option<PathBuf>,
    },
    /// Two-branch spoof detector.
    Detector {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = BranchArg::Both)]
        branch: BranchArg,
        /// Continue from an existing detector checkpoint.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum BranchArg {
    Whole,
    Patch,
    Both,
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Genuine/imposter scores and TAR@FAR for one pairing.
    Match {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        embedder: Option<PathBuf>,
        /// `live-live`, `live-spoof`, or `live-<material>`.
        #[arg(long, default_value = "live-live")]
        pairing: String,
        #[arg(long, value_delimiter = ',', default_value = "0.0001,0.001,0.01")]
        far: Vec<f64>,
        #[arg(long, default_value_t = DEFAULT_IMPOSTER_CAP)]
        imposter_cap: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Score CSV; TAR@FAR is printed.
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-set identity-leakage audit.
    Leakage {
        #[arg(long)]
        synthetic: PathBuf,
        #[arg(long)]
        training: PathBuf,
        #[arg(long)]
        threshold: f64,
        #[arg(long)]
        embedder: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum ExperimentCommand {
    /// Real/synthetic training-composition sweep from the [experiment] section.
    Augmentation {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::FAILURE
        }
    }
}

fn cfg_err(m: impl Into<String>) -> PipelineError {
    PipelineError::Config(m.into())
}

fn write_rows(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| PipelineError::io(path, e.into()))?;
    w.write_record(header).map_err(|e| PipelineError::io(path, e.into()))?;
    for r in rows {
        w.write_record(&r).map_err(|e| PipelineError::io(path, e.into()))?;
    }
    w.flush().map_err(|e| PipelineError::io(path, e))
}

fn load_embedder(path: &Option<PathBuf>, seed: u64) -> Result<Box<dyn Embedder>> {
    Ok(match path {
        Some(p) => Box::new(LearnedEmbedder::load(p)?),
        None => Box::new(ProjectionEmbedder::new(seed)),
    })
}

fn parse_pairing(s: &str) -> Result<Pairing> {
    match s {
        "live-live" => Ok(Pairing::LiveLive),
        "live-spoof" => Ok(Pairing::LiveSpoof(None)),
        other => {
            let m = other.strip_prefix("live-").ok_or_else(|| cfg_err(format!("unknown pairing {other:?}")))?;
            let m = MaterialLabel::new(m).map_err(|e| cfg_err(e.to_string()))?;
            Ok(Pairing::LiveSpoof(Some(m)))
        }
    }
}

fn run(cmd: Command) -> Result<serde_json::Value> {
    match cmd {
        Command::Basis { command: BasisCommand::Synth { grid, t, seed, out } } => {
            let b = synthesize_basis(grid, grid, t, seed)?;
            b.save(&out)?;
            Ok(json!({"basis": out, "grid": grid, "t": t}))
        }
        Command::Toy(a) => {
            let materials = a
                .materials
                .iter()
                .map(|m| MaterialLabel::new(m).map_err(|e| cfg_err(e.to_string())))
                .collect::<Result<Vec<_>>>()?;
            let cfg = ToyCorpusConfig {
                n_fingers: a.fingers,
                impressions: a.impressions,
                materials,
                size: a.size,
                seed: a.seed,
                domain: match a.domain {
                    Domain::Real => ToyDomain::Real,
                    Domain::Synthetic => ToyDomain::Synthetic,
                },
                finger_prefix: a.prefix,
                test_fraction: a.test_fraction,
            };
            let ds = write_toy_corpus(&a.out, &cfg)?;
            Ok(json!({"root": a.out, "images": ds.len()}))
        }
        Command::Train(t) => train(t),
        Command::Generate { config } => {
            let cfg = PipelineConfig::load(&config)?;
            let g = cfg.generation()?;
            let stages = Stages::load(g)?;
            let out = generate_with(g, &stages)?;
            Ok(json!({
                "root": g.output_root,
                "images": out.dataset.len(),
                "rendered": out.rendered,
                "reused": out.reused,
            }))
        }
        Command::Stats { data, binarizer, out } => {
            let ds = data.load()?;
            let b: Box<dyn RidgeBinarizer> = match &binarizer {
                Some(p) => Box::new(LearnedBinarizer::load(p)?),
                None => Box::new(ClassicalBinarizer::default()),
            };
            let stats = fingerprint_stats(&ds, b.as_ref())?;
            write_stats_table(&out, &stats)?;
            Ok(json!({"table": out, "images": stats.images, "minutiae_per_megapixel": stats.minutiae_per_megapixel}))
        }
        Command::Eval(EvalCommand::Match { data, embedder, pairing, far, imposter_cap, seed, out }) => {
            let ds = data.load()?;
            let emb = load_embedder(&embedder, seed)?;
            let d = score_distributions(&ds, emb.as_ref(), &parse_pairing(&pairing)?, imposter_cap, seed)?;
            let rows = [("genuine", d.scores.genuine()), ("imposter", d.scores.imposter())]
                .into_iter()
                .flat_map(|(l, s)| s.iter().map(move |v| vec![l.to_string(), format!("{v:.6}")]));
            write_rows(&out, &["label", "score"], rows)?;
            let points = tar_at_far(&d.scores, &far).map_err(|e| PipelineError::Pairing(e.into()))?;
            Ok(json!({
                "pairing": d.pairing,
                "genuine": d.scores.genuine().len(),
                "imposter": d.scores.imposter().len(),
                "tar_at_far": points.iter().map(|p| json!({"far": p.target, "threshold": p.threshold, "tar": p.rate})).collect::<Vec<_>>(),
            }))
        }
        Command::Eval(EvalCommand::Leakage { synthetic, training, threshold, embedder, seed, out }) => {
            let syn = DatasetRef::new(synthetic).load()?;
            let tr = DatasetRef::new(training).load()?;
            let emb = load_embedder(&embedder, seed)?;
            let r = leakage_check(&syn, &tr, emb.as_ref(), threshold)?;
            let rows = r.pairs.iter().map(|p| vec![p.synthetic.clone(), p.training.clone(), format!("{:.6}", p.score)]);
            write_rows(&out, &["synthetic", "training", "score"], rows)?;
            Ok(json!({
                "comparisons": r.total_comparisons,
                "flagged_pairs": r.pairs.len(),
                "flagged_fingers": r.flagged_fingers,
                "max_score": r.max_score,
            }))
        }
        Command::Experiment(ExperimentCommand::Augmentation { config }) => {
            let cfg = PipelineConfig::load(&config)?;
            let x = cfg.experiment()?;
            let r = run_experiment(x)?;
            Ok(json!({"out_dir": x.out_dir, "cells": r.cells.len(), "skipped": r.skipped}))
        }
        Command::Report { config } => {
            let cfg = PipelineConfig::load(&config)?;
            let b = replicate_eval_protocol(cfg.report()?)?;
            Ok(json!({"out_dir": b.dir, "steps": b.summary.steps}))
        }
        Command::Binarize { input, output, binarizer } => {
            let img = read_gray(&input)?;
            let ridges = match &binarizer {
                Some(p) => LearnedBinarizer::load(p)?.binarize(&img)?,
                None => ClassicalBinarizer::default().ridge_map(&img),
            };
            write_gray(&output, &ridges)?;
            Ok(json!({"output": output}))
        }
    }
}

fn train(cmd: TrainCommand) -> Result<serde_json::Value> {
    match cmd {
        TrainCommand::Masterprint { data, out, resolution, steps, batch, seed, losses } => {
            let ds = data.load()?.filter(|r| r.is_live);
            let mut cfg = GanTrainConfig { seed, ..Default::default() };
            cfg.steps = steps.unwrap_or(cfg.steps);
            cfg.batch = batch.unwrap_or(cfg.batch);
            let model_cfg = GanConfig { resolution, ..GanConfig::default() };
            let mut gan = MasterPrintGan::new(model_cfg, seed)?;
            let rows = train_masterprint_gan(&ds, &mut gan, &cfg)?;
            gan.save(&out)?;
            if let Some(p) = losses {
                write_rows(&p, &["step", "loss_g", "loss_d"], rows.iter().map(|r| {
                    vec![r.step.to_string(), format!("{:.6}", r.loss_g), format!("{:.6}", r.loss_d)]
                }))?;
            }
            Ok(json!({"checkpoint": out, "steps": rows.len()}))
        }
        TrainCommand::Binarizer { data, out, steps, seed, losses } => {
            let pairs = teacher_pairs(&data.load()?)?;
            let mut cfg = BinarizerTrainConfig { seed, ..Default::default() };
            cfg.steps = steps.unwrap_or(cfg.steps);
            let mut model = LearnedBinarizer::new(BinarizerConfig::default(), seed)?;
            let rows = train_binarizer(&mut model, &pairs, &cfg)?;
            model.save(&out)?;
            if let Some(p) = losses {
                write_rows(&p, &["step", "loss"], rows.iter().map(|r| vec![r.step.to_string(), format!("{:.6}", r.loss)]))?;
            }
            Ok(json!({"checkpoint": out, "pairs": pairs.len(), "steps": rows.len()}))
        }
        TrainCommand::Embedder { data, out, steps, seed, losses } => {
            let ds = data.load()?;
            let mut cfg = EmbedderTrainConfig { seed, ..Default::default() };
            cfg.steps = steps.unwrap_or(cfg.steps);
            let mut model = LearnedEmbedder::new(EmbedderConfig::default(), seed)?;
            let rows = train_embedder(&mut model, &ds, &cfg)?;
            model.save(&out)?;
            if let Some(p) = losses {
                write_rows(&p, &["step", "loss"], rows.iter().map(|r| vec![r.step.to_string(), format!("{:.6}", r.loss)]))?;
            }
            Ok(json!({"checkpoint": out, "steps": rows.len()}))
        }
        TrainCommand::Renderer { data, out, embedder, binarizer, scope, init, in_size, out_size, steps, seed, losses } => {
            let ds = data.load()?;
            let emb = LearnedEmbedder::load(&embedder)?;
            let bin = LearnedBinarizer::load(&binarizer)?;
            let model_cfg = RendererConfig { in_size, out_size, ..RendererConfig::default() };
            let mut cfg = RendererTrainConfig { seed, ..Default::default() };
            cfg.steps = steps.unwrap_or(cfg.steps);
            let loss_rows = |tag: &str, rows: &[forge_nn::renderer::RendererLossRow]| -> Vec<Vec<String>> {
                rows.iter()
                    .map(|r| {
                        vec![
                            tag.to_string(),
                            r.step.to_string(),
                            format!("{:.6}", r.l_adv),
                            format!("{:.6}", r.l_dp),
                            format!("{:.6}", r.l_i),
                            format!("{:.6}", r.l_d),
                        ]
                    })
                    .collect()
            };
            let header = ["tier", "step", "l_adv", "l_dp", "l_i", "l_d"];
            match scope {
                None => {
                    let (lineage, logs) = train_renderer_schedule(&ds, &emb, &bin, &model_cfg, &cfg, &out)?;
                    if let Some(p) = losses {
                        write_rows(&p, &header, logs.iter().flat_map(|(t, rows)| loss_rows(t, rows)))?;
                    }
                    Ok(json!({"lineage": out.join("lineage.json"), "checkpoints": lineage.entries.len()}))
                }
                Some(tag) => {
                    let scope = RenderScope::parse(&tag)?;
                    let parent = init.as_deref().map(Renderer::load).transpose()?;
                    let (model, rows) = train_renderer(&ds, parent.as_ref(), &scope, &emb, &bin, &model_cfg, &cfg)?;
                    model.save(&out)?;
                    if let Some(p) = losses {
                        write_rows(&p, &header, loss_rows(&scope.tag(), &rows))?;
                    }
                    Ok(json!({"checkpoint": out, "material": model.material, "parent": model.parent}))
                }
            }
        }
        TrainCommand::Detector { data, out, branch, init, steps, seed } => {
            let mut cfg = DetectorTrainConfig { seed, ..Default::default() };
            cfg.steps = steps.unwrap_or(cfg.steps);
            let samples = detector_samples(&data.load()?, cfg.validation_fraction, seed)?;
            let mut det = match &init {
                Some(p) => SpoofDetector::load(p)?,
                None => SpoofDetector::new(DetectorConfig::default(), seed)?,
            };
            let branches: &[Branch] = match branch {
                BranchArg::Whole => &[Branch::Whole],
                BranchArg::Patch => &[Branch::Patch],
                BranchArg::Both => &[Branch::Whole, Branch::Patch],
            };
            let mut logs = Vec::new();
            for &b in branches {
                let log = train_detector(&mut det, &samples, b, &cfg)?;
                logs.push(json!({"branch": b, "validation_accuracy": log.validation_accuracy, "train_inputs": log.train_inputs}));
            }
            det.save(&out)?;
            Ok(json!({"checkpoint": out, "branches": logs}))
        }
    }
}
