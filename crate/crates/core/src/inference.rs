//! Task-agnostic prediction with the max-output rule: the task whose head gives the
//! largest summed per-sample maximum over a test batch wins the whole batch.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datagen::{SampleRecord, TaskData};
use crate::losses::softmax;
use crate::metrics::{MetricError, MetricsReport, TaskMetrics};
use crate::nn::{forward, NetworkConfig, NnError, ParamStore, TaskHead};
use crate::subnet::{argmax, ContinualLearner, SubnetError};

#[derive(Debug, thiserror::Error)]
pub enum InferenceError {
    #[error("state error: {0}")]
    State(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Subnet(#[from] SubnetError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// What is summed by the max-output rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    #[default]
    RawLogits,
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskPrediction {
    pub selected_task: u32,
    pub per_task_scores: BTreeMap<u32, f64>,
    /// Global class ids.
    pub predictions: Vec<usize>,
}

/// A set of per-task classifiers over one input space.
pub trait TaskModel {
    fn task_ids(&self) -> Vec<u32>;

    /// Global classes of a task's head.
    fn task_classes(&self, task_id: u32) -> Option<Vec<usize>>;

    fn task_logits(&self, task_id: u32, batch: &[&[f32]]) -> Result<Vec<Vec<f64>>, InferenceError>;

    /// Predictions for a batch drawn from `true_task`. With `oracle`, the true task's head
    /// is used directly. The selected task is `None` for models without task selection.
    fn predict_batch(
        &self,
        batch: &[&[f32]],
        true_task: u32,
        oracle: bool,
        mode: ScoreMode,
    ) -> Result<(Vec<usize>, Option<u32>), InferenceError> {
        if oracle {
            let classes = self.task_classes(true_task).ok_or_else(|| InferenceError::State(format!("unknown task {true_task}")))?;
            let logits = self.task_logits(true_task, batch)?;
            return Ok((logits.iter().map(|l| classes[argmax(l)]).collect(), Some(true_task)));
        }
        let p = select_task(self, batch, mode)?;
        Ok((p.predictions, Some(p.selected_task)))
    }
}

fn scored(logits: &[f64], mode: ScoreMode) -> Vec<f64> {
    match mode {
        ScoreMode::RawLogits => logits.to_vec(),
        ScoreMode::Softmax => softmax(logits),
    }
}

/// Picks t* = argmax_t Σ_i max_k score_t(x_i)_k, ties to the lowest task id.
/// Returns t* and the per-task sums.
pub fn select_from_logits(per_task: &BTreeMap<u32, Vec<Vec<f64>>>, mode: ScoreMode) -> Option<(u32, BTreeMap<u32, f64>)> {
    let mut scores = BTreeMap::new();
    let mut best: Option<(u32, f64)> = None;
    for (t, rows) in per_task {
        let s: f64 = rows.iter().map(|l| scored(l, mode).into_iter().fold(f64::NEG_INFINITY, f64::max)).sum();
        scores.insert(*t, s);
        if best.map_or(true, |(_, b)| s > b) {
            best = Some((*t, s));
        }
    }
    best.map(|(t, _)| (t, scores))
}

pub fn select_task<M: TaskModel + ?Sized>(model: &M, batch: &[&[f32]], mode: ScoreMode) -> Result<TaskPrediction, InferenceError> {
    let tasks = model.task_ids();
    if tasks.is_empty() {
        return Err(InferenceError::State("no committed tasks".into()));
    }
    if batch.is_empty() {
        return Err(InferenceError::EmptyBatch);
    }
    let per_task: BTreeMap<u32, Vec<Vec<f64>>> =
        tasks.iter().map(|t| Ok((*t, model.task_logits(*t, batch)?))).collect::<Result<_, InferenceError>>()?;
    let (selected_task, per_task_scores) = select_from_logits(&per_task, mode).expect("nonempty task set");
    let classes = model.task_classes(selected_task).expect("selected task exists");
    let predictions = per_task[&selected_task].iter().map(|l| classes[argmax(l)]).collect();
    Ok(TaskPrediction { selected_task, per_task_scores, predictions })
}

impl TaskModel for ContinualLearner {
    fn task_ids(&self) -> Vec<u32> {
        self.masks.keys().copied().collect()
    }

    fn task_classes(&self, task_id: u32) -> Option<Vec<usize>> {
        self.heads.get(&task_id).map(|h| h.classes.clone())
    }

    fn task_logits(&self, task_id: u32, batch: &[&[f32]]) -> Result<Vec<Vec<f64>>, InferenceError> {
        Ok(ContinualLearner::task_logits(self, task_id, batch)?)
    }
}

/// One trunk shared unmasked by every task head (sequential finetuning).
#[derive(Debug, Clone)]
pub struct SharedTrunkModel {
    pub config: NetworkConfig,
    pub store: ParamStore,
    pub heads: BTreeMap<u32, TaskHead>,
}

impl TaskModel for SharedTrunkModel {
    fn task_ids(&self) -> Vec<u32> {
        self.heads.keys().copied().collect()
    }

    fn task_classes(&self, task_id: u32) -> Option<Vec<usize>> {
        self.heads.get(&task_id).map(|h| h.classes.clone())
    }

    fn task_logits(&self, task_id: u32, batch: &[&[f32]]) -> Result<Vec<Vec<f64>>, InferenceError> {
        let head = self.heads.get(&task_id).ok_or_else(|| InferenceError::State(format!("unknown task {task_id}")))?;
        Ok(forward(&self.store, &self.config, None, head, batch)?.logits)
    }
}

/// An independent network per task.
#[derive(Debug, Clone)]
pub struct SeparateModels {
    pub config: NetworkConfig,
    pub models: BTreeMap<u32, (ParamStore, TaskHead)>,
}

impl TaskModel for SeparateModels {
    fn task_ids(&self) -> Vec<u32> {
        self.models.keys().copied().collect()
    }

    fn task_classes(&self, task_id: u32) -> Option<Vec<usize>> {
        self.models.get(&task_id).map(|(_, h)| h.classes.clone())
    }

    fn task_logits(&self, task_id: u32, batch: &[&[f32]]) -> Result<Vec<Vec<f64>>, InferenceError> {
        let (store, head) = self.models.get(&task_id).ok_or_else(|| InferenceError::State(format!("unknown task {task_id}")))?;
        Ok(forward(store, &self.config, None, head, batch)?.logits)
    }
}

/// A single head over the union of all classes.
#[derive(Debug, Clone)]
pub struct JointModel {
    pub config: NetworkConfig,
    pub store: ParamStore,
    pub head: TaskHead,
    pub task_classes: BTreeMap<u32, Vec<usize>>,
}

impl TaskModel for JointModel {
    fn task_ids(&self) -> Vec<u32> {
        self.task_classes.keys().copied().collect()
    }

    fn task_classes(&self, task_id: u32) -> Option<Vec<usize>> {
        self.task_classes.get(&task_id).cloned()
    }

    /// Logits of the unified head restricted to the task's classes.
    fn task_logits(&self, task_id: u32, batch: &[&[f32]]) -> Result<Vec<Vec<f64>>, InferenceError> {
        let classes = self.task_classes.get(&task_id).ok_or_else(|| InferenceError::State(format!("unknown task {task_id}")))?;
        let cols: Vec<usize> = classes.iter().map(|c| self.head.local_index(*c).expect("joint head covers every class")).collect();
        let logits = forward(&self.store, &self.config, None, &self.head, batch)?.logits;
        Ok(logits.into_iter().map(|l| cols.iter().map(|i| l[*i]).collect()).collect())
    }

    fn predict_batch(&self, batch: &[&[f32]], _true_task: u32, _oracle: bool, _mode: ScoreMode) -> Result<(Vec<usize>, Option<u32>), InferenceError> {
        let logits = forward(&self.store, &self.config, None, &self.head, batch)?.logits;
        Ok((logits.iter().map(|l| self.head.classes[argmax(l)]).collect(), None))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub batch_size: usize,
    pub oracle: bool,
    pub mode: ScoreMode,
    /// Interleave tasks inside evaluation batches instead of keeping each batch pure.
    pub mixed_batches: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { batch_size: 32, oracle: false, mode: ScoreMode::RawLogits, mixed_batches: false }
    }
}

/// Test-split metrics for every task in `tasks`. Predictions outside a sample's task
/// count as errors.
pub fn evaluate_stream<M: TaskModel + ?Sized>(
    model: &M,
    tasks: &[&TaskData],
    num_groups: usize,
    opts: &EvalOptions,
) -> Result<MetricsReport, InferenceError> {
    let bs = opts.batch_size.max(1);
    // (task index, record) in evaluation order, cut into batches.
    let mut batches: Vec<Vec<(usize, &SampleRecord)>> = Vec::new();
    if opts.mixed_batches && !opts.oracle {
        let longest = tasks.iter().map(|t| t.test.len()).max().unwrap_or(0);
        let mut items = Vec::new();
        for i in 0..longest {
            for (k, t) in tasks.iter().enumerate() {
                if let Some(r) = t.test.get(i) {
                    items.push((k, r));
                }
            }
        }
        batches.extend(items.chunks(bs).map(|c| c.to_vec()));
    } else {
        for (k, t) in tasks.iter().enumerate() {
            batches.extend(t.test.chunks(bs).map(|c| c.iter().map(|r| (k, r)).collect::<Vec<_>>()));
        }
    }

    let mut preds: Vec<Vec<usize>> = vec![Vec::new(); tasks.len()];
    let mut selected_right: Vec<(usize, usize)> = vec![(0, 0); tasks.len()];
    let mut any_selection = false;
    for batch in &batches {
        let imgs: Vec<&[f32]> = batch.iter().map(|(_, r)| r.image.as_slice()).collect();
        // In a mixed batch the first sample's task only matters for oracle mode, which
        // never mixes.
        let (p, sel) = model.predict_batch(&imgs, tasks[batch[0].0].task_id, opts.oracle, opts.mode)?;
        for ((k, _), pred) in batch.iter().zip(p) {
            preds[*k].push(pred);
            if let Some(s) = sel {
                any_selection = true;
                selected_right[*k].1 += 1;
                if s == tasks[*k].task_id {
                    selected_right[*k].0 += 1;
                }
            }
        }
    }

    let mut per_task = Vec::new();
    for (k, t) in tasks.iter().enumerate() {
        if t.test.is_empty() {
            continue;
        }
        let n = t.classes.len();
        // Test records are visited in their stored order in both batching schemes.
        let local: Vec<usize> = preds[k].iter().map(|p| t.classes.iter().position(|c| c == p).unwrap_or(n)).collect();
        let labels: Vec<usize> = t.test.iter().map(|r| t.classes.iter().position(|c| *c == r.label).unwrap_or(n)).collect();
        let attrs: Vec<usize> = t.test.iter().map(|r| r.attribute).collect();
        let mut m = TaskMetrics::compute(t.task_id, &local, &labels, &attrs, n, num_groups)?;
        if any_selection {
            m.task_selection_acc = Some(selected_right[k].0 as f64 / selected_right[k].1.max(1) as f64);
        }
        per_task.push(m);
    }
    Ok(MetricsReport::new(per_task, if opts.mixed_batches && !opts.oracle { "mixed" } else { "pure" }))
}
