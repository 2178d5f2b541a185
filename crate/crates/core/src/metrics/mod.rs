//! Classification and group-fairness metrics, and the sensitive-attribute probe.
//!
//! Predictions and labels are local class indices `0..num_classes`; a prediction equal
//! to or above `num_classes` stands for "some class outside this task" and is never
//! correct.
//!
//! Multi-class, multi-group reductions:
//! * DPR: per class, min over groups of P(ŷ=c | A=a) divided by the max; mean over
//!   classes that some group is predicted as.
//! * EOD: per class, the largest pairwise TPR gap between groups; mean over classes
//!   with at least one positive in every group.

mod probe;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use probe::{attribute_probe, auc, pooled_features, ProbeConfig};

pub const DPR_DEFINITION: &str = "per-class min/max ratio of group prediction rates, mean over predicted classes";
pub const EOD_DEFINITION: &str = "per-class max pairwise TPR gap across groups, mean over classes with positives in every group";

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum MetricError {
    #[error("empty input")]
    Empty,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("metric undefined: {0}")]
    Undefined(String),
}

fn check_len(a: usize, b: usize) -> Result<(), MetricError> {
    if a != b {
        return Err(MetricError::LengthMismatch(a, b));
    }
    if a == 0 {
        return Err(MetricError::Empty);
    }
    Ok(())
}

/// (macro F1, balanced accuracy). Classes without support are left out of both means.
pub fn classification_metrics(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<(f64, f64), MetricError> {
    check_len(preds.len(), labels.len())?;
    let mut tp = vec![0usize; num_classes];
    let mut support = vec![0usize; num_classes];
    let mut predicted = vec![0usize; num_classes];
    for (p, y) in preds.iter().zip(labels) {
        if *y >= num_classes {
            return Err(MetricError::Undefined(format!("label {y} outside {num_classes} classes")));
        }
        support[*y] += 1;
        if *p < num_classes {
            predicted[*p] += 1;
            if p == y {
                tp[*y] += 1;
            }
        }
    }
    let mut f1_sum = 0.0;
    let mut recall_sum = 0.0;
    let mut n = 0usize;
    for c in 0..num_classes {
        if support[c] == 0 {
            log::debug!("class {c} has no support; left out of F1 and balanced accuracy");
            continue;
        }
        let fp = predicted[c] - tp[c];
        let fneg = support[c] - tp[c];
        f1_sum += 2.0 * tp[c] as f64 / (2 * tp[c] + fp + fneg) as f64;
        recall_sum += tp[c] as f64 / support[c] as f64;
        n += 1;
    }
    Ok((f1_sum / n as f64, recall_sum / n as f64))
}

fn groups_present(attrs: &[usize]) -> BTreeSet<usize> {
    attrs.iter().copied().collect()
}

/// Demographic parity ratio in [0, 1]; 1 when every group receives every class at the
/// same rate.
pub fn dpr(preds: &[usize], attrs: &[usize], num_classes: usize, num_groups: usize) -> Result<f64, MetricError> {
    check_len(preds.len(), attrs.len())?;
    let groups = groups_present(attrs);
    if groups.len() < 2 {
        return Err(MetricError::Undefined("demographic parity needs at least two groups".into()));
    }
    let g_max = num_groups.max(groups.iter().max().map_or(0, |g| g + 1));
    let mut size = vec![0usize; g_max];
    let mut hits = vec![0usize; g_max * num_classes];
    for (p, a) in preds.iter().zip(attrs) {
        size[*a] += 1;
        if *p < num_classes {
            hits[*a * num_classes + *p] += 1;
        }
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for c in 0..num_classes {
        let rates: Vec<f64> = groups.iter().map(|a| hits[a * num_classes + c] as f64 / size[*a] as f64).collect();
        let max = rates.iter().copied().fold(0.0, f64::max);
        if max == 0.0 {
            log::debug!("class {c} never predicted; left out of DPR");
            continue;
        }
        let min = rates.iter().copied().fold(f64::INFINITY, f64::min);
        total += min / max;
        n += 1;
    }
    if n == 0 {
        return Err(MetricError::Undefined("no class was ever predicted".into()));
    }
    Ok(total / n as f64)
}

/// Equal opportunity difference in [0, 1]; 0 when TPRs agree across groups.
pub fn eod(preds: &[usize], labels: &[usize], attrs: &[usize], num_classes: usize) -> Result<f64, MetricError> {
    check_len(preds.len(), labels.len())?;
    check_len(preds.len(), attrs.len())?;
    let groups = groups_present(attrs);
    if groups.len() < 2 {
        return Err(MetricError::Undefined("equal opportunity needs at least two groups".into()));
    }
    let g_max = groups.iter().max().map_or(0, |g| g + 1);
    let mut positives = vec![0usize; g_max * num_classes];
    let mut tp = vec![0usize; g_max * num_classes];
    for ((p, y), a) in preds.iter().zip(labels).zip(attrs) {
        if *y >= num_classes {
            return Err(MetricError::Undefined(format!("label {y} outside {num_classes} classes")));
        }
        positives[a * num_classes + y] += 1;
        if p == y {
            tp[a * num_classes + y] += 1;
        }
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for c in 0..num_classes {
        if groups.iter().any(|a| positives[a * num_classes + c] == 0) {
            log::debug!("class {c} lacks positives in some group; left out of EOD");
            continue;
        }
        let tprs: Vec<f64> = groups.iter().map(|a| tp[a * num_classes + c] as f64 / positives[a * num_classes + c] as f64).collect();
        let max = tprs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = tprs.iter().copied().fold(f64::INFINITY, f64::min);
        total += max - min;
        n += 1;
    }
    if n == 0 {
        return Err(MetricError::Undefined("no class has positives in every group".into()));
    }
    Ok(total / n as f64)
}

/// Balanced accuracy restricted to each group's samples.
pub fn per_group_accuracy(preds: &[usize], labels: &[usize], attrs: &[usize], num_classes: usize) -> BTreeMap<usize, f64> {
    let mut out = BTreeMap::new();
    for g in groups_present(attrs) {
        let idx: Vec<usize> = (0..attrs.len()).filter(|i| attrs[*i] == g).collect();
        let p: Vec<usize> = idx.iter().map(|i| preds[*i]).collect();
        let y: Vec<usize> = idx.iter().map(|i| labels[*i]).collect();
        if let Ok((_, bacc)) = classification_metrics(&p, &y, num_classes) {
            out.insert(g, bacc);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task_id: u32,
    pub macro_f1: f64,
    pub balanced_acc: f64,
    pub per_group_acc: BTreeMap<usize, f64>,
    pub dpr: Option<f64>,
    pub eod: Option<f64>,
    pub task_selection_acc: Option<f64>,
    /// One-vs-one attribute probe AUC keyed by "a-b".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe_auc: Option<BTreeMap<String, f64>>,
}

impl TaskMetrics {
    pub fn compute(task_id: u32, preds: &[usize], labels: &[usize], attrs: &[usize], num_classes: usize, num_groups: usize) -> Result<Self, MetricError> {
        let (macro_f1, balanced_acc) = classification_metrics(preds, labels, num_classes)?;
        let dpr = match dpr(preds, attrs, num_classes, num_groups) {
            Ok(v) => Some(v),
            Err(e) => {
                log::info!("task {task_id}: DPR undefined ({e})");
                None
            }
        };
        let eod = match eod(preds, labels, attrs, num_classes) {
            Ok(v) => Some(v),
            Err(e) => {
                log::info!("task {task_id}: EOD undefined ({e})");
                None
            }
        };
        Ok(Self {
            task_id,
            macro_f1,
            balanced_acc,
            per_group_acc: per_group_accuracy(preds, labels, attrs, num_classes),
            dpr,
            eod,
            task_selection_acc: None,
            probe_auc: None,
        })
    }

    /// Mean AUC over all group pairs.
    pub fn mean_probe_auc(&self) -> Option<f64> {
        self.probe_auc.as_ref().filter(|m| !m.is_empty()).map(|m| m.values().sum::<f64>() / m.len() as f64)
    }
}

/// Metrics averaged over tasks; a field undefined for some task averages the rest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AveragedMetrics {
    pub macro_f1: f64,
    pub balanced_acc: f64,
    pub per_group_acc: BTreeMap<usize, f64>,
    pub dpr: Option<f64>,
    pub eod: Option<f64>,
    pub task_selection_acc: Option<f64>,
    pub probe_auc: Option<f64>,
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl AveragedMetrics {
    pub fn from_tasks(tasks: &[TaskMetrics]) -> Self {
        let groups: BTreeSet<usize> = tasks.iter().flat_map(|t| t.per_group_acc.keys().copied()).collect();
        Self {
            macro_f1: mean_of(tasks.iter().map(|t| t.macro_f1)).unwrap_or(f64::NAN),
            balanced_acc: mean_of(tasks.iter().map(|t| t.balanced_acc)).unwrap_or(f64::NAN),
            per_group_acc: groups
                .into_iter()
                .filter_map(|g| mean_of(tasks.iter().filter_map(|t| t.per_group_acc.get(&g).copied())).map(|v| (g, v)))
                .collect(),
            dpr: mean_of(tasks.iter().filter_map(|t| t.dpr)),
            eod: mean_of(tasks.iter().filter_map(|t| t.eod)),
            task_selection_acc: mean_of(tasks.iter().filter_map(|t| t.task_selection_acc)),
            probe_auc: mean_of(tasks.iter().filter_map(|t| t.mean_probe_auc())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_task: Vec<TaskMetrics>,
    pub averaged: AveragedMetrics,
    pub dpr_definition: String,
    pub eod_definition: String,
    /// "pure" when every evaluation batch holds samples of a single task.
    pub batch_composition: String,
}

impl MetricsReport {
    pub fn new(per_task: Vec<TaskMetrics>, batch_composition: &str) -> Self {
        Self {
            averaged: AveragedMetrics::from_tasks(&per_task),
            per_task,
            dpr_definition: DPR_DEFINITION.to_string(),
            eod_definition: EOD_DEFINITION.to_string(),
            batch_composition: batch_composition.to_string(),
        }
    }
}
