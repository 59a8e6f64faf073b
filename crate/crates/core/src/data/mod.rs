//! Study manifests, grayscale images, stitching, tokenisation, prompts and
//! corpus statistics.

mod image;
mod manifest;
mod sequence;
mod stats;
mod tokenizer;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use image::{
    decode_pgm, decode_png, encode_pgm, encoder_input, load_image, load_study_images, resize_to_encoder,
    select_images, stitch_horizontal, GrayImage, MAX_STUDY_IMAGES,
};
pub use manifest::{load_manifest, parse_manifest, Manifest, Rejection, StudySample};
pub use sequence::{
    build_prompt_sequence, build_training_sequence, render_prompt, training_sequence_from_text, TokenRole, TokenSequence,
    MAX_TEXT_TOKENS,
};
pub use stats::{corpus_stats, CellStats, CorpusStats};
pub use tokenizer::{
    detokenize, detokenize_bytes, tokenize, tokenize_template, BOS_ID, EOS_ID, IMAGE_ID, IMAGE_TAG, PAD_ID, VOCAB_SIZE,
};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),
    #[error("image decode error: {0}")]
    Decode(String),
    #[error("{0}")]
    Contract(String),
}

/// Report section; each trained model targets exactly one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Section {
    Findings,
    Impressions,
}

impl Section {
    pub const ALL: [Section; 2] = [Section::Findings, Section::Impressions];

    pub fn as_str(self) -> &'static str {
        match self {
            Section::Findings => "findings",
            Section::Impressions => "impressions",
        }
    }

    /// Name of the per-section model.
    pub fn model_name(self) -> &'static str {
        match self {
            Section::Findings => "Med-CXRGen-F",
            Section::Impressions => "Med-CXRGen-I",
        }
    }
}

impl fmt::Display for Section {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Section {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "findings" => Ok(Section::Findings),
            "impressions" => Ok(Section::Impressions),
            other => Err(format!("unknown section {other:?} (expected findings|impressions)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "training")]
    Training,
    #[serde(rename = "validation")]
    Validation,
    #[serde(rename = "test-public")]
    TestPublic,
    #[serde(rename = "test-hidden")]
    TestHidden,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Training, Split::Validation, Split::TestPublic, Split::TestHidden];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Training => "training",
            Split::Validation => "validation",
            Split::TestPublic => "test-public",
            Split::TestHidden => "test-hidden",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.as_str() == s)
            .ok_or_else(|| format!("unknown split {s:?}"))
    }
}
