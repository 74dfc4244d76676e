//! Test-time adaptation of toy vision-language models with a scorer-model
//! reward.
//!
//! Given a single test input and a frozen high-capacity scorer, the adaptable
//! model samples candidates from its own output distribution (top-K classes,
//! top-K gallery entries, or beam-searched captions), scores each candidate
//! with the scorer, centers the scores on their mean, and takes policy-gradient
//! steps that raise the expected score. Episodes reset to a pristine
//! checkpoint; an optional momentum buffer accumulates adapted weights and
//! commits them back at a fixed interval.
//!
//! The crate ships:
//!
//! - [`numcore`] — dense tensors, named parameter trees, and a reverse-mode
//!   gradient tape over a fixed op vocabulary, with a finite-difference oracle;
//! - [`models`] — a toy contrastively pretrained dual encoder (the adaptable
//!   student and the frozen scorer both use it);
//! - [`captioner`] — a toy autoregressive captioner (learnable projector,
//!   frozen recurrent decoder) with beam search;
//! - [`reward`] — clipped-similarity scoring, mean-baseline centering, and
//!   weighted scorer ensembles;
//! - [`adapt`] — the REINFORCE surrogate loss, AdamW, episodic reset, the
//!   momentum buffer, and the comparison objectives (entropy minimization,
//!   pseudo-label, knowledge distillation);
//! - [`pipelines`] — per-sample adaptation episodes for classification,
//!   retrieval, and captioning, with step-by-step traces;
//! - [`bench`] — a synthetic domain-shift benchmark generator, metrics
//!   (accuracy, recall@K, calibration error, caption attribute F1), and the
//!   experiment runner behind the `rlcf` command-line tool.
//!
//! The `examples/` directory contains one runnable walkthrough per capability;
//! start with `cargo run --example adapt_classify`.

pub mod adapt;
pub mod bench;
pub mod captioner;
pub mod checkpoint;
pub mod error;
pub mod models;
pub mod numcore;
pub mod pipelines;
pub mod reward;

pub use error::{Error, Result};
