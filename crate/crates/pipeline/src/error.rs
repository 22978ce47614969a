use std::path::PathBuf;

use forge_core::image::ImageIoError;
use forge_core::matching::PairingError;
use forge_core::minutiae::StatsError;
use forge_core::warp::WarpError;
use forge_core::DataError;
use forge_nn::experiment::ExperimentError;
use forge_nn::params::ParamsError;
use forge_nn::renderer::RenderError;
use forge_nn::TrainError;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Image(#[from] ImageIoError),
    #[error(transparent)]
    Warp(#[from] WarpError),
    #[error(transparent)]
    Params(#[from] ParamsError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Pairing(#[from] PairingError),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error(transparent)]
    Candle(#[from] candle_core::Error),
}

impl PipelineError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            PipelineError::Config(_) => "config_error",
            PipelineError::Io { .. } => "io_error",
            PipelineError::Data(_) => "data_error",
            PipelineError::Image(_) => "image_error",
            PipelineError::Warp(_) => "warp_error",
            PipelineError::Params(_) => "checkpoint_error",
            PipelineError::Render(_) => "render_error",
            PipelineError::Train(_) => "train_error",
            PipelineError::Stats(_) => "stats_error",
            PipelineError::Pairing(_) => "pairing_error",
            PipelineError::Experiment(ExperimentError::ProvenanceOverlap(_)) => "provenance_overlap",
            PipelineError::Experiment(_) => "experiment_error",
            PipelineError::Candle(_) => "runtime_error",
        }
    }

    /// `{"error": {"kind": ..., "message": ...}}`
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Body<'a> {
            kind: &'a str,
            message: String,
        }
        #[derive(Serialize)]
        struct Wrap<'a> {
            error: Body<'a>,
        }
        serde_json::to_string(&Wrap { error: Body { kind: self.kind(), message: self.to_string() } })
            .expect("plain strings serialize")
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;
