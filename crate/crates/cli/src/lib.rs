//! Experiment pipeline behind the `reverb-doa-lab` binary: simulate, extract
//! features, train, search alpha, evaluate and report.

use std::path::PathBuf;

use reverb_doa::eval::EvalError;
use reverb_doa::features::FeatureError;
use reverb_doa::room_sim::RoomError;
use reverb_doa::srp::SrpError;
use reverb_doa::vae::VaeError;
use thiserror::Error;

pub mod config;
pub mod pipeline;

pub use config::{LabConfig, Precision, Settings};
pub use pipeline::{Lab, RunManifest};

#[derive(Debug, Error)]
pub enum LabError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl LabError {
    /// Process exit status: 2 configuration, 3 I/O, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Config(_) => 2,
            LabError::Io { .. } | LabError::Format { .. } => 3,
            LabError::Numerical(_) => 4,
        }
    }
}

impl From<RoomError> for LabError {
    fn from(e: RoomError) -> Self {
        match e {
            RoomError::Io { path, source } => LabError::Io { path, source },
            RoomError::Format { path, msg } => LabError::Format { path, msg },
            RoomError::Degenerate(_) | RoomError::InsufficientLength(_) => LabError::Numerical(e.to_string()),
            _ => LabError::Config(e.to_string()),
        }
    }
}

impl From<FeatureError> for LabError {
    fn from(e: FeatureError) -> Self {
        match e {
            FeatureError::Io { path, source } => LabError::Io { path, source },
            FeatureError::Format { path, msg } => LabError::Format { path, msg },
            _ => LabError::Config(e.to_string()),
        }
    }
}

impl From<VaeError> for LabError {
    fn from(e: VaeError) -> Self {
        match e {
            VaeError::Io { path, source } => LabError::Io { path, source },
            VaeError::Format { path, msg } => LabError::Format { path, msg },
            VaeError::Config(_) | VaeError::BadInput { .. } => LabError::Config(e.to_string()),
            _ => LabError::Numerical(e.to_string()),
        }
    }
}

impl From<SrpError> for LabError {
    fn from(e: SrpError) -> Self {
        LabError::Config(e.to_string())
    }
}

impl From<EvalError> for LabError {
    fn from(e: EvalError) -> Self {
        LabError::Config(e.to_string())
    }
}
