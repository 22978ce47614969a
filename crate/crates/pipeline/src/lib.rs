//! Orchestration on top of `forge-core` and `forge-nn`: dataset generation,
//! the evaluation bundle, the augmentation experiment, and their TOML config.

pub mod config;
pub mod error;
pub mod generate;
pub mod report;

use forge_nn::experiment::{run_augmentation_experiment, EvalSet, ExperimentResults};

pub use config::{GenerationConfig, PipelineConfig, ReportConfig};
pub use error::{PipelineError, Result};
pub use generate::generate_dataset;
pub use report::replicate_eval_protocol;

/// Loads the datasets named in the section, runs the experiment and writes
/// `results.csv`, `composition_table.csv`, `varying_percent.csv` and
/// `experiment.json` into `out_dir`.
pub fn run_experiment(section: &config::ExperimentSection) -> Result<ExperimentResults> {
    let real = section.real.load()?;
    let synthetic = section.synthetic.load()?;
    let evals = section
        .eval
        .iter()
        .map(|e| Ok(EvalSet { name: e.name.clone(), dataset: e.data().load()? }))
        .collect::<Result<Vec<_>>>()?;
    let results = run_augmentation_experiment(&real, &synthetic, &evals, &section.experiment_config())?;
    results.write_all(&section.out_dir)?;
    Ok(results)
}
