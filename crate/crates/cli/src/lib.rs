//! Command-line driver: synthetic data, two-phase training, tiled
//! inference over full videos, and evaluation.

pub mod commands;
pub mod config;
pub mod tiling;

pub use commands::{
    cmd_eval, cmd_infer, cmd_synth, cmd_train, infer_video, EvalSummary, InferRequest,
    InferSummary, Manifest, RunOptions, Split, SynthSummary, TrainRequest, TrainSummary,
};
pub use config::RunConfig;
pub use tiling::{Tile, TiledPlan};

use densespot::seqdata::DataError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 4,
        }
    }

    /// Missing or unreadable files are I/O errors; malformed or inconsistent
    /// contents are configuration errors.
    pub fn from_data(e: DataError) -> Self {
        match e {
            DataError::Io { .. } => CliError::Io(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}
