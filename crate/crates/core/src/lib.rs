//! Continual learning with bias-aware structured pruning.
//!
//! Each task is learned in two stages on a shared, fixed-size conv network: a
//! deliberately biased stage trained with generalized cross-entropy, then pruning
//! of the units whose activations separate easy from hard samples, followed by
//! weighted finetuning of the surviving subnetwork. Committed subnetworks are frozen
//! and selected at test time by the max-output rule.

pub mod bias;
pub mod datagen;
pub mod harness;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod subnet;

/// Stable identifier of a sample across a task stream.
pub type SampleId = u64;
