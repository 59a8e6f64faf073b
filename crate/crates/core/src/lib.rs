//! Desk-scale chest X-ray report generation.
//!
//! A small ViT encoder turns a stitched multi-view study into patch features
//! (taken from its penultimate block), a GELU MLP adapter maps those into the
//! embedding space of a byte-level causal language model, and training runs
//! in two stages: adapter-only alignment, then LoRA fine-tuning of the LM with
//! the encoder and adapter frozen. Reports are decoded greedily and scored
//! with BLEU-4, ROUGE-L and F1 aggregations over clinical side data.
//!
//! Everything numeric sits on [`tensor`], a small reverse-mode autodiff
//! engine written for this crate. See the `examples/` directory for one
//! runnable program per capability.

pub mod adapter;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod fixtures;
pub mod lm;
pub mod lora;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod selfcheck;
pub mod tensor;
pub mod train;
pub mod vision;

use thiserror::Error;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use data::DataError;
pub use model::{Model, ModelConfig};
pub use params::Params;
pub use tensor::{Element, Graph, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("config error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("sequence of length {len} exceeds max_positions {max}")]
    Length { len: usize, max: usize },
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("staging error: {0}")]
    Staging(String),
    #[error("records without a counterpart: {}", .0.join(", "))]
    Alignment(Vec<String>),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
