//! Hierarchical intermediate-objective ensembling for ternary
//! persuasiveness prediction.
//!
//! The crate is organized as:
//! - [`nn`]: a small deterministic feed-forward network engine (f64, SGD,
//!   summed cross-entropy, bit-exact snapshots).
//! - [`features`]: temporal pooling, TF-IDF, Welch t-test feature
//!   selection, and ternary label binning.
//! - [`dataset`]: multimodal sample records, JSONL i/o, speaker-disjoint
//!   fold splitting, and a planted-structure synthetic generator.
//! - [`hierarchy`]: the hierarchically composed model with per-network
//!   subtask gating on end-to-end updates, plus stacking and late-fusion
//!   baselines.
//! - [`harness`]: cross-validation experiment driver, variant comparison,
//!   and report emission.

pub mod dataset;
pub mod features;
pub mod harness;
pub mod hierarchy;
pub mod nn;
