//! Cascaded cross-lingual audio-visual retrieval at desk scale.
//!
//! The pipeline: generate or ingest a corpus of clips (audio plus pooled
//! visual features), pretrain a two-branch contrastive embedding model on a
//! source-language corpus, evaluate it zero-shot on a target-language
//! corpus, then fine-tune on the target. Everything is deterministic given
//! a seed: corpora, batches, training, checkpoints, and reports.
//!
//! Modules, bottom up:
//! - [`dsp`]: waveforms to log mel spectrograms, pad/crop rule, MELS files
//! - [`corpus`]: speech segmentation, clip filtering, video-disjoint
//!   splits, subsampling, manifest I/O
//! - [`synth`]: paired bilingual synthetic corpora with a controllable
//!   shared-sound fraction
//! - [`graph`]: reverse-mode differentiation over a closed op set, Adam,
//!   and a finite-difference gradient checker
//! - [`encoders`]: the audio and visual branches and their shared space
//! - [`loss`]: the bidirectional margin-softmax contrastive objective
//! - [`trainer`]: batch geometry, the training loop, checkpoints, and the
//!   pretrain/fine-tune cascade
//! - [`eval`]: recall@k, median rank, full-split evaluation, transfer
//!   curves
//! - [`experiments`]: the canonical synthetic benchmark
//! - [`cli`]: the command-line surface

pub mod cli;
pub mod corpus;
pub mod dsp;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod graph;
pub mod loss;
pub mod rng;
pub mod synth;
pub mod trainer;

#[cfg(doctest)]
mod book;

pub use error::{Error, Result};
