//! Context-aware moderation of newspaper comments.
//!
//! The crate covers the full keep-online (0) / remove (1) study: corpus
//! ingestion with leakage-safe balancing ([`corpus`]), German text
//! normalization and sentinel-token fusion ([`textprep`]), user-history
//! online ratios and count vectors ([`features`]), shallow baselines
//! ([`baselines`]), LSTM/CNN classifiers ([`deepmodels`]), zero-shot LLM
//! prompting ([`llmclient`]) and the metric/report harness ([`evalharness`]).
//!
//! Data-parallel inner loops (minibatch gradients, batch inference, logistic
//! regression gradients) go through [`par`], which uses rayon when the
//! `parallel` feature is enabled and plain iterators otherwise. Results are
//! bit-identical between the two modes.

pub mod baselines;
pub mod corpus;
pub mod deepmodels;
pub mod evalharness;
pub mod features;
pub mod llmclient;
pub mod par;
pub mod synth;
pub mod textprep;

/// Label of a comment that stays online.
pub const KEEP: u8 = 0;
/// Label of a comment removed by a moderator.
pub const REMOVE: u8 = 1;
