//! The decoder network: session alignment, patch embedding with sinusoidal
//! positions, a Conformer stack and a two-layer character head.

mod config;
mod network;
mod params;
pub mod weights;

pub use config::{count_parameters, ModelConfig, ParamCount};
pub use network::{sinusoidal_table, DecoderModel, ModelInput, ModelOutput, Pass};
pub use params::{Binding, Param, ParamGroup, ParamId, ParamStore};

use crate::numcore::NumError;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("trial {trial}: session {session} out of range ({sessions} sessions)")]
    SessionOutOfRange {
        trial: usize,
        session: usize,
        sessions: usize,
    },
    #[error("trial {trial}: {frames} valid frames, fewer than the patch size {patch}")]
    TrialTooShort { trial: usize, frames: usize, patch: usize },
    #[error("tensor {tensor}: expected shape {expected:?}, file holds {found:?}")]
    ShapeMismatch {
        tensor: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor {0} missing from weight file")]
    MissingTensor(String),
    #[error("weight file holds unknown tensor {0}")]
    UnknownTensor(String),
    #[error("corrupt weight file: {0}")]
    Corrupt(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Num(#[from] NumError),
}
