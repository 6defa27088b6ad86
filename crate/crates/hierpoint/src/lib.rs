//! End-to-end information extraction from document images.
//!
//! The pipeline decomposes extraction into three stages that share a common
//! point-based representation: characters are read along a word's center
//! line, each word is summarized by its center point, and each entity by the
//! mean of its member word centers.
//!
//! - **spotting**: a center-heatmap word spotter that regresses a straight
//!   center line per word and reads characters at points sampled along it.
//! - **grouping**: a character grid rasterized from the spotted text is fused
//!   with backbone features; a center-point detector predicts entity boxes
//!   and spotted words are assigned to them.
//! - **labeling**: a transformer over layout-, vision- and text-embedded
//!   tokens classifies each entity.
//!
//! Training combines per-stage objectives (masked image reconstruction,
//! entity detection, word-to-entity relations, masked language modeling,
//! reading-order reasoning) in a pre-training stage and a slimmer fine-tuning
//! stage. Everything runs on a small deterministic f64 autodiff engine so
//! analytic gradients can be verified against finite differences.

pub mod autograd;
// pub mod chargrid;
pub mod checkpoint;
pub mod config;
pub mod doc;
pub mod geom;
// pub mod grouping;
// pub mod labeling;
// pub mod metrics;
// pub mod model;
pub mod nn;
// pub mod objectives;
// pub mod pipeline;
// pub mod spotting;
pub mod synthdoc;
// pub mod viz;
pub mod vocab;

use thiserror::Error;

/// Errors surfaced by pipeline components.
#[derive(Debug, Error)]
pub enum Error {
    #[error("entity has no words")]
    EmptyEntity,
    #[error("character {0:?} (U+{1:04X}) is not in the vocabulary")]
    UnknownChar(char, u32),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid document: {0}")]
    InvalidDocument(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("sequence length {got} exceeds maximum {max}")]
    SequenceTooLong { got: usize, max: usize },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("layout overflow: could not place document contents")]
    LayoutOverflow,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
