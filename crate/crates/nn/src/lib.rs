//! Networks, losses and training loops: master-print GAN, learned binarizer,
//! texture renderer, matcher embedding and spoof detector.

pub mod binarizer;
pub mod conv;
pub mod detector;
pub mod embedder;
pub mod experiment;
pub mod gan;
pub mod layers;
pub mod losses;
pub mod optim;
pub mod params;
pub mod renderer;

use forge_core::DataError;

/// Failures shared by the training loops.
#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("lineage error: {0}")]
    Lineage(String),
    #[error("no records for material scope {0}")]
    EmptyMaterial(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Params(#[from] params::ParamsError),
    #[error(transparent)]
    Loss(#[from] losses::LossError),
    #[error(transparent)]
    Candle(#[from] candle_core::Error),
}
