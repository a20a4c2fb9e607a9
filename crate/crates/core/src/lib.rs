//! Curation, synthesis and evaluation toolkit for medical multimodal corpora.
//!
//! The pipeline filters, deduplicates and decontaminates image-text corpora,
//! synthesizes new instruction data through chat-completion annotators,
//! assembles stage-wise training mixtures with verifiable rewards, and scores
//! model outputs with a benchmark harness and report-generation metrics.
//!
//! Scoring code is generic over [`num::Scalar`] (`f32` or `f64`); the aliases
//! below pin the `f64` instantiations used by the CLI.

pub mod client;
pub mod contamination;
pub mod corpus;
pub mod dedup;
pub mod error;
pub mod eval;
pub mod filter;
pub mod metrics;
pub mod mixture;
pub mod num;
pub mod prompts;
pub mod synth;
pub mod text;
pub mod version;

pub use corpus::{load_manifest, write_manifest, DatasetManifest, ImageRef, ModalityTag, PerceptualHash, Sample, TaskKind};
pub use error::{Error, Result};
pub use text::{count_tokens, normalize_text};

pub type MetricReportF64 = metrics::MetricReport<f64>;
pub type RewardConfigF64 = mixture::RewardConfig<f64>;
