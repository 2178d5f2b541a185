//! Unit lifecycle across tasks: bias-aware pruning into per-task masks, freezing,
//! and the per-task two-stage training pipeline.

mod pipeline;
mod prune;
mod units;

pub use pipeline::{
    finetune_debiased, run_task_pipeline, train_biased_stage, train_ce, Ablations, AlphaMode, BiasedStage,
    ContinualLearner, FinetuneReport, FitReport, PipelineConfig, ScoreSource, TaskOutcome, TrainConfig, ValScore,
};
pub(crate) use pipeline::argmax;
pub use prune::{prune_count, prune_to_mask, random_scores, PruneOutcome};
pub use units::{all_units, TaskMask, UnitId, UnitRegistry};

use crate::bias::BiasError;
use crate::losses::LossError;
use crate::nn::NnError;

#[derive(Debug, thiserror::Error)]
pub enum SubnetError {
    #[error("state error: {0}")]
    State(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("layer {0} has no unit left to keep")]
    Exhausted(usize),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Bias(#[from] BiasError),
    #[error(transparent)]
    Loss(#[from] LossError),
}
