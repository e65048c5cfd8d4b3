//! Desk-scale study of how joint transcription/translation models handle
//! person names.
//!
//! The crate provides, end to end:
//!
//! - a reverse-mode autodiff tensor core ([`autodiff`]);
//! - transformer building blocks with a convolutional subsampler ([`layers`]);
//! - base encoder–decoder models and the triangle model, whose translation
//!   decoder also attends to the transcription decoder's output embeddings,
//!   trained with a weighted two-task loss ([`models`]);
//! - a byte-pair-encoding subword tokenizer ([`tokenizer`]);
//! - a synthetic multilingual speech-translation corpus generator that
//!   controls name frequency, referent language, and speaker accent
//!   ([`corpus`]);
//! - Adam training with inverse-square-root scheduling and checkpoint
//!   averaging ([`training`]);
//! - WER, BLEU, token-level name accuracy, an error taxonomy, and
//!   inter-annotator agreement ([`evaluation`]);
//! - decision-tree factor analysis and balanced-frequency subset
//!   construction ([`analysis`]).
//!
//! See the `book/` guide for the concepts and the `tristan` CLI for the
//! experiment pipeline.

pub mod analysis;
pub mod autodiff;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod layers;
pub mod models;
pub mod rng;
pub mod tokenizer;
pub mod training;

mod book;

pub use error::{Error, Result};
