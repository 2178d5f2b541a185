use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bias::{bias_scores, partition_samples, BiasError, BiasScoreTable, HardSetRule, SamplePartition};
use crate::datagen::{is_bias_conflicting, SampleRecord, TaskData};
use crate::losses::{alpha_derivative, alpha_raw_for, alpha_value, ce_loss, gce_from_logits, softmax, GceConfig, SampleWeightCache};
use crate::metrics::{classification_metrics, eod};
use crate::nn::{forward, ChannelMask, NetworkConfig, Optimizer, OptimizerKind, ParamStore, Snapshot, TaskHead, Trainer};

use super::{prune_to_mask, random_scores, SubnetError, TaskMask, UnitId, UnitRegistry};

/// Optimization settings shared by every training stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub stage1_epochs: usize,
    /// Epochs without a validation-loss improvement before stage 1 stops.
    pub patience: usize,
    pub finetune_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { batch_size: 32, learning_rate: 1e-3, stage1_epochs: 200, patience: 20, finetune_epochs: 20 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablations {
    /// Stage 1 trained with plain cross-entropy.
    pub ce_for_gce: bool,
    /// Units pruned by uniform random scores instead of bias scores.
    pub random_prune: bool,
    /// Finetuning with unweighted cross-entropy.
    pub plain_ce_finetune: bool,
    /// Units frozen by earlier tasks are invisible to later ones.
    pub no_kt: bool,
}

impl Ablations {
    pub fn any(&self) -> bool {
        self.ce_for_gce || self.random_prune || self.plain_ce_finetune || self.no_kt
    }

    pub fn names(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.ce_for_gce {
            out.push("ce_for_gce");
        }
        if self.random_prune {
            out.push("random_prune");
        }
        if self.plain_ce_finetune {
            out.push("plain_ce_finetune");
        }
        if self.no_kt {
            out.push("no_kt");
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum AlphaMode {
    Fixed { value: f64 },
    /// α = logistic(alpha_raw), alpha_raw updated by SGD on the weighted loss.
    Trainable { init: f64, learning_rate: f64 },
}

impl Default for AlphaMode {
    fn default() -> Self {
        AlphaMode::Fixed { value: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub gce: GceConfig,
    pub tau: f64,
    pub hard_rule: HardSetRule,
    pub gamma: f64,
    pub train: TrainConfig,
    pub alpha: AlphaMode,
    /// Weight of (1 − EOD) next to balanced accuracy in finetune model selection.
    pub eod_weight: f64,
    pub ablations: Ablations,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            gce: GceConfig::default(),
            tau: 0.7,
            hard_rule: HardSetRule::default(),
            gamma: 0.6,
            train: TrainConfig::default(),
            alpha: AlphaMode::default(),
            eod_weight: 1.0,
            ablations: Ablations::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if let Err(e) = self.gce.validate() {
            errs.push(e.to_string());
        }
        if !(self.tau > 0.5 && self.tau < 1.0) {
            errs.push(format!("tau = {} outside (0.5, 1)", self.tau));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            errs.push(format!("gamma = {} outside (0, 1)", self.gamma));
        }
        if self.train.batch_size == 0 {
            errs.push("batch size must be positive".into());
        }
        if !(self.train.learning_rate > 0.0) {
            errs.push(format!("learning rate {} must be positive", self.train.learning_rate));
        }
        match self.alpha {
            AlphaMode::Fixed { value } | AlphaMode::Trainable { init: value, .. } if !(value > 0.0 && value < 1.0) => {
                errs.push(format!("alpha = {value} outside (0, 1)"))
            }
            _ => {}
        }
        errs
    }
}

fn local_target(head: &TaskHead, r: &SampleRecord) -> Result<usize, SubnetError> {
    head.local_index(r.label).ok_or(SubnetError::Bias(BiasError::ForeignLabel { id: r.id, label: r.label, task: head.task_id }))
}

/// Logits of `samples` under `mask`, in chunks.
pub(crate) fn logits_of(
    config: &NetworkConfig,
    store: &ParamStore,
    head: &TaskHead,
    mask: Option<&ChannelMask>,
    samples: &[SampleRecord],
) -> Result<Vec<Vec<f64>>, SubnetError> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(64) {
        let imgs: Vec<&[f32]> = chunk.iter().map(|r| r.image.as_slice()).collect();
        out.extend(forward(store, config, mask, head, &imgs)?.logits);
    }
    Ok(out)
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Gradient of the batch-mean loss: receives the batch and its logits, returns the
/// summed loss and d(mean loss)/d logits.
type BatchObjective<'a> = dyn FnMut(&[&SampleRecord], &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>), SubnetError> + 'a;

/// One pass over `samples` in shuffled mini-batches. Returns the mean training loss.
#[allow(clippy::too_many_arguments)]
fn run_epoch(
    config: &NetworkConfig,
    store: &mut ParamStore,
    head: &mut TaskHead,
    mask: Option<&ChannelMask>,
    samples: &[SampleRecord],
    batch_size: usize,
    trainer: &mut Trainer,
    rng: &mut ChaCha8Rng,
    objective: &mut BatchObjective<'_>,
) -> Result<f64, SubnetError> {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    for chunk in order.chunks(batch_size.max(1)) {
        let batch: Vec<&SampleRecord> = chunk.iter().map(|i| &samples[*i]).collect();
        let imgs: Vec<&[f32]> = batch.iter().map(|r| r.image.as_slice()).collect();
        let logits = trainer.forward(store, config, mask, head, &imgs)?.logits.clone();
        let (loss, grads) = objective(&batch, &logits)?;
        total += loss;
        trainer.backward_and_step(store, head, &grads)?;
    }
    Ok(if samples.is_empty() { 0.0 } else { total / samples.len() as f64 })
}

fn ce_objective(head_classes: &TaskHead) -> impl FnMut(&[&SampleRecord], &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>), SubnetError> + '_ {
    move |batch, logits| {
        let n = batch.len() as f64;
        let mut total = 0.0;
        let mut grads = Vec::with_capacity(batch.len());
        for (r, l) in batch.iter().zip(logits) {
            let (loss, g) = ce_loss(l, local_target(head_classes, r)?)?;
            total += loss;
            grads.push(g.into_iter().map(|v| v / n).collect());
        }
        Ok((total, grads))
    }
}

fn mean_eval_loss(
    config: &NetworkConfig,
    store: &ParamStore,
    head: &TaskHead,
    mask: Option<&ChannelMask>,
    samples: &[SampleRecord],
    gce: Option<&GceConfig>,
) -> Result<f64, SubnetError> {
    let logits = logits_of(config, store, head, mask, samples)?;
    let mut total = 0.0;
    for (r, l) in samples.iter().zip(&logits) {
        let t = local_target(head, r)?;
        total += match gce {
            Some(cfg) => gce_from_logits(l, t, cfg)?.0,
            None => ce_loss(l, t)?.0,
        };
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Result of a loss-monitored training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
}

/// Trains with early stopping on validation loss (`patience` epochs) and restores the
/// best epoch's weights. Without validation data every epoch runs and the last is kept.
#[allow(clippy::too_many_arguments)]
fn fit_with_early_stopping(
    config: &NetworkConfig,
    store: &mut ParamStore,
    head: &mut TaskHead,
    mask: Option<&ChannelMask>,
    train: &[SampleRecord],
    val: &[SampleRecord],
    train_cfg: &TrainConfig,
    gce: Option<&GceConfig>,
    rng: &mut ChaCha8Rng,
) -> Result<FitReport, SubnetError> {
    let mut trainer = Trainer::new(Optimizer::new(OptimizerKind::adam(), train_cfg.learning_rate));
    let mut report = FitReport { epochs_run: 0, best_epoch: 0, train_loss: Vec::new(), val_loss: Vec::new() };
    if val.is_empty() {
        log::info!("task {}: no validation data, early stopping disabled", head.task_id);
    }
    let mut best: Option<(f64, ParamStore, TaskHead)> = None;
    let mut since_best = 0;
    for epoch in 1..=train_cfg.stage1_epochs {
        let loss = {
            let frozen_head = head.clone();
            let mut objective: Box<BatchObjective<'_>> = match gce {
                Some(cfg) => Box::new(move |batch: &[&SampleRecord], logits: &[Vec<f64>]| {
                    let n = batch.len() as f64;
                    let mut total = 0.0;
                    let mut grads = Vec::with_capacity(batch.len());
                    for (r, l) in batch.iter().zip(logits) {
                        let (loss, g) = gce_from_logits(l, local_target(&frozen_head, r)?, cfg)?;
                        total += loss;
                        grads.push(g.into_iter().map(|v| v / n).collect());
                    }
                    Ok((total, grads))
                }),
                None => Box::new(move |batch: &[&SampleRecord], logits: &[Vec<f64>]| ce_objective(&frozen_head)(batch, logits)),
            };
            run_epoch(config, store, head, mask, train, train_cfg.batch_size, &mut trainer, rng, objective.as_mut())?
        };
        report.train_loss.push(loss);
        report.epochs_run = epoch;
        if val.is_empty() {
            report.best_epoch = epoch;
            continue;
        }
        let v = mean_eval_loss(config, store, head, mask, val, gce)?;
        report.val_loss.push(v);
        if best.as_ref().map_or(true, |(b, _, _)| v < *b) {
            best = Some((v, store.clone(), head.clone()));
            report.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= train_cfg.patience {
                log::info!("task {}: early stop after epoch {epoch}, best epoch {}", head.task_id, report.best_epoch);
                break;
            }
        }
    }
    if let Some((_, s, h)) = best {
        *store = s;
        *head = h;
    }
    Ok(report)
}

/// Cross-entropy training of `head` and the unfrozen trunk, with early stopping on
/// validation loss. Used by the baselines.
#[allow(clippy::too_many_arguments)]
pub fn train_ce(
    config: &NetworkConfig,
    store: &mut ParamStore,
    head: &mut TaskHead,
    mask: Option<&ChannelMask>,
    train: &[SampleRecord],
    val: &[SampleRecord],
    train_cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<FitReport, SubnetError> {
    fit_with_early_stopping(config, store, head, mask, train, val, train_cfg, None, rng)
}

/// Output of the bias-amplification stage.
#[derive(Debug, Clone)]
pub struct BiasedStage {
    pub snapshot: Snapshot,
    pub weight_cache: SampleWeightCache,
    pub fit: FitReport,
}

/// GCE-trains the free units and `head` on the task (CE under the `ce_for_gce`
/// ablation), then snapshots the biased network and caches each training sample's GCE
/// loss under it.
#[allow(clippy::too_many_arguments)]
pub fn train_biased_stage(
    config: &NetworkConfig,
    store: &mut ParamStore,
    registry: &UnitRegistry,
    head: &mut TaskHead,
    mask: Option<&ChannelMask>,
    task: &TaskData,
    pcfg: &PipelineConfig,
    rng: &mut ChaCha8Rng,
) -> Result<BiasedStage, SubnetError> {
    if task.train.is_empty() {
        return Err(SubnetError::Bias(BiasError::EmptyDataset));
    }
    if registry.free_units().is_empty() {
        log::warn!("task {}: no free units left, only the head is trained", task.task_id);
    }
    let gce = (!pcfg.ablations.ce_for_gce).then_some(&pcfg.gce);
    let fit = fit_with_early_stopping(config, store, head, mask, &task.train, &task.val, &pcfg.train, gce, rng)?;
    let snapshot = Snapshot::new(config, store, head);
    let mut weight_cache = SampleWeightCache::new();
    for chunk in task.train.chunks(64) {
        let imgs: Vec<&[f32]> = chunk.iter().map(|r| r.image.as_slice()).collect();
        let pass = snapshot.forward(mask, &imgs)?;
        for (r, l) in chunk.iter().zip(&pass.logits) {
            let p = softmax(l)[local_target(head, r)?];
            weight_cache.insert(r.id, crate::losses::gce_loss(p, &pcfg.gce).0)?;
        }
    }
    Ok(BiasedStage { snapshot, weight_cache, fit })
}

/// Validation summary of a masked subnetwork.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValScore {
    pub balanced_acc: f64,
    pub eod: Option<f64>,
    /// Accuracy on bias-conflicting validation samples.
    pub conflicting_acc: Option<f64>,
    pub selection: f64,
}

fn val_score(
    config: &NetworkConfig,
    store: &ParamStore,
    head: &TaskHead,
    mask: &ChannelMask,
    task: &TaskData,
    num_groups: usize,
    eod_weight: f64,
) -> Result<Option<ValScore>, SubnetError> {
    if task.val.is_empty() {
        return Ok(None);
    }
    let logits = logits_of(config, store, head, Some(mask), &task.val)?;
    let preds: Vec<usize> = logits.iter().map(|l| argmax(l)).collect();
    let labels = task.val.iter().map(|r| local_target(head, r)).collect::<Result<Vec<_>, _>>()?;
    let attrs: Vec<usize> = task.val.iter().map(|r| r.attribute).collect();
    let (_, bacc) = classification_metrics(&preds, &labels, head.num_classes()).map_err(|e| SubnetError::Config(e.to_string()))?;
    let eod = eod(&preds, &labels, &attrs, head.num_classes()).ok();
    let conflicting: Vec<bool> = task.val.iter().map(|r| is_bias_conflicting(task, r, num_groups)).collect();
    let n_conf = conflicting.iter().filter(|c| **c).count();
    let conflicting_acc = (n_conf > 0).then(|| {
        (0..preds.len()).filter(|i| conflicting[*i] && preds[*i] == labels[*i]).count() as f64 / n_conf as f64
    });
    let selection = bacc + eod_weight * eod.map_or(0.0, |e| 1.0 - e);
    Ok(Some(ValScore { balanced_acc: bacc, eod, conflicting_acc, selection }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub epochs_run: usize,
    /// Epoch whose weights were kept; 0 means no epoch ran.
    pub selected_epoch: usize,
    pub train_loss: Vec<f64>,
    pub val: Vec<ValScore>,
    /// α after each epoch.
    pub alpha: Vec<f64>,
}

/// Finetunes the masked subnetwork with per-sample loss W(x)·CE, W = exp(α·cached GCE)
/// (W ≡ 1 under `plain_ce_finetune`). Keeps the epoch maximizing balanced accuracy plus
/// `eod_weight`·(1 − EOD) on validation; without validation data the last epoch is kept.
#[allow(clippy::too_many_arguments)]
pub fn finetune_debiased(
    config: &NetworkConfig,
    store: &mut ParamStore,
    head: &mut TaskHead,
    mask: &TaskMask,
    registry: &UnitRegistry,
    task: &TaskData,
    num_groups: usize,
    weight_cache: &SampleWeightCache,
    pcfg: &PipelineConfig,
    rng: &mut ChaCha8Rng,
) -> Result<FinetuneReport, SubnetError> {
    if registry.committed_tasks().contains(&mask.task_id) {
        return Err(SubnetError::State(format!("task {} is already committed", mask.task_id)));
    }
    let mut report = FinetuneReport { epochs_run: 0, selected_epoch: 0, train_loss: Vec::new(), val: Vec::new(), alpha: Vec::new() };
    let (mut alpha_raw, alpha_lr) = match pcfg.alpha {
        AlphaMode::Fixed { value } => (alpha_raw_for(value), None),
        AlphaMode::Trainable { init, learning_rate } => (alpha_raw_for(init), Some(learning_rate)),
    };
    store.alpha_raw = alpha_raw;
    let weighted = !pcfg.ablations.plain_ce_finetune;
    if task.val.is_empty() {
        log::warn!("task {}: empty validation split, keeping last finetune epoch", task.task_id);
    }
    let mut trainer = Trainer::new(Optimizer::new(OptimizerKind::adam(), pcfg.train.learning_rate));
    let mut best: Option<(f64, ParamStore, TaskHead)> = None;
    for epoch in 1..=pcfg.train.finetune_epochs {
        let loss = {
            let frozen_head = head.clone();
            let alpha_raw_ref = &mut alpha_raw;
            let mut objective = |batch: &[&SampleRecord], logits: &[Vec<f64>]| -> Result<(f64, Vec<Vec<f64>>), SubnetError> {
                let n = batch.len() as f64;
                let alpha = alpha_value(*alpha_raw_ref);
                let mut total = 0.0;
                let mut dalpha = 0.0;
                let mut grads = Vec::with_capacity(batch.len());
                for (r, l) in batch.iter().zip(logits) {
                    let (ce, g) = ce_loss(l, local_target(&frozen_head, r)?)?;
                    let w = if weighted {
                        let cached = weight_cache
                            .get(r.id)
                            .ok_or(SubnetError::Bias(BiasError::MissingSample(r.id)))?;
                        dalpha += cached * crate::losses::wce_weight(cached, alpha) * ce;
                        crate::losses::wce_weight(cached, alpha)
                    } else {
                        1.0
                    };
                    total += w * ce;
                    grads.push(g.into_iter().map(|v| w * v / n).collect());
                }
                if let (Some(lr), true) = (alpha_lr, weighted) {
                    *alpha_raw_ref -= lr * dalpha / n * alpha_derivative(*alpha_raw_ref);
                }
                Ok((total, grads))
            };
            run_epoch(config, store, head, Some(&mask.mask), &task.train, pcfg.train.batch_size, &mut trainer, rng, &mut objective)?
        };
        store.alpha_raw = alpha_raw;
        report.train_loss.push(loss);
        report.alpha.push(alpha_value(alpha_raw));
        report.epochs_run = epoch;
        report.selected_epoch = epoch;
        if let Some(score) = val_score(config, store, head, &mask.mask, task, num_groups, pcfg.eod_weight)? {
            report.val.push(score);
            if best.as_ref().map_or(true, |(b, _, _)| score.selection > *b) {
                best = Some((score.selection, store.clone(), head.clone()));
            }
        }
    }
    if let Some((sel, s, h)) = best {
        report.selected_epoch = report.val.iter().position(|v| v.selection == sel).map_or(report.epochs_run, |i| i + 1);
        *store = s;
        *head = h;
    }
    Ok(report)
}

/// How the pruning ranking of a task was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSource {
    Bias,
    Random,
    /// Bias scoring was impossible, random scores used instead.
    RandomFallback,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskOutcome {
    pub task_id: u32,
    pub mask: TaskMask,
    pub score_source: ScoreSource,
    pub scores: BiasScoreTable,
    pub pruned: BTreeSet<UnitId>,
    pub restored: Vec<UnitId>,
    pub partition_sizes: Option<(usize, usize, usize)>,
    pub stage1: FitReport,
    pub val_before_finetune: Option<ValScore>,
    pub finetune: FinetuneReport,
    /// Channels the task could use during bias amplification and scoring.
    pub available: ChannelMask,
    /// The stage-1 biased network.
    #[serde(skip)]
    pub biased: Option<Snapshot>,
}

fn partition_sizes(p: &SamplePartition) -> (usize, usize, usize) {
    let count = |m: &BTreeMap<usize, BTreeSet<u64>>| m.values().map(|s| s.len()).sum();
    (count(&p.easy), count(&p.hard), p.excluded.len())
}

/// The shared trunk, its unit registry and every committed task.
#[derive(Debug, Clone)]
pub struct ContinualLearner {
    pub config: NetworkConfig,
    pub store: ParamStore,
    pub registry: UnitRegistry,
    pub masks: BTreeMap<u32, TaskMask>,
    pub heads: BTreeMap<u32, TaskHead>,
    pub rng: ChaCha8Rng,
}

impl ContinualLearner {
    /// Trunk initialized from `config.seed`; `seed` drives head init and shuffling.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self, SubnetError> {
        let store = ParamStore::init(&config)?;
        Ok(Self {
            registry: UnitRegistry::new(&config),
            store,
            config,
            masks: BTreeMap::new(),
            heads: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn learn_task(&mut self, task: &TaskData, num_groups: usize, pcfg: &PipelineConfig) -> Result<TaskOutcome, SubnetError> {
        run_task_pipeline(self, task, num_groups, pcfg)
    }

    /// Masked forward of a committed task.
    pub fn task_logits(&self, task_id: u32, batch: &[&[f32]]) -> Result<Vec<Vec<f64>>, SubnetError> {
        let (mask, head) = match (self.masks.get(&task_id), self.heads.get(&task_id)) {
            (Some(m), Some(h)) => (m, h),
            _ => return Err(SubnetError::State(format!("task {task_id} is not committed"))),
        };
        Ok(forward(&self.store, &self.config, Some(&mask.mask), head, batch)?.logits)
    }
}

/// Bias amplification, scoring, pruning, weighted finetuning and commit of one task.
pub fn run_task_pipeline(
    learner: &mut ContinualLearner,
    task: &TaskData,
    num_groups: usize,
    pcfg: &PipelineConfig,
) -> Result<TaskOutcome, SubnetError> {
    let errs = pcfg.validate();
    if !errs.is_empty() {
        return Err(SubnetError::Config(errs.join("; ")));
    }
    if learner.heads.contains_key(&task.task_id) {
        return Err(SubnetError::State(format!("task {} is already committed", task.task_id)));
    }
    let ContinualLearner { config, store, registry, masks, heads, rng } = learner;
    let mut head = TaskHead::new(config, task.task_id, task.classes.clone(), rng);
    // Without knowledge transfer, units owned by earlier tasks are switched off.
    let available = if pcfg.ablations.no_kt { registry.free_mask() } else { ChannelMask::full(config) };

    let stage = train_biased_stage(config, store, registry, &mut head, Some(&available), task, pcfg, rng)?;

    let available_units: Vec<UnitId> = registry
        .units()
        .filter(|u| available.is_kept(u.layer, u.channel))
        .collect();
    let (scores, source, sizes) = if pcfg.ablations.random_prune {
        (random_scores(task.task_id, &available_units, rng), ScoreSource::Random, None)
    } else {
        let partition = partition_samples(&stage.snapshot, Some(&available), &task.train, pcfg.tau, pcfg.hard_rule)?;
        let sizes = partition_sizes(&partition);
        match bias_scores(&stage.snapshot, Some(&available), &partition, &task.train) {
            Ok(t) => (t, ScoreSource::Bias, Some(sizes)),
            Err(BiasError::Unscoreable(id)) => {
                log::warn!("task {id} is unscoreable, falling back to random pruning");
                (random_scores(task.task_id, &available_units, rng), ScoreSource::RandomFallback, Some(sizes))
            }
            Err(e) => return Err(e.into()),
        }
    };
    let outcome = prune_to_mask(&scores, pcfg.gamma, config)?;
    let val_before = val_score(config, store, &head, &outcome.mask.mask, task, num_groups, pcfg.eod_weight)?;
    let finetune =
        finetune_debiased(config, store, &mut head, &outcome.mask, registry, task, num_groups, &stage.weight_cache, pcfg, rng)?;

    registry.commit_task(&outcome.mask, store, &mut head)?;
    masks.insert(task.task_id, outcome.mask.clone());
    heads.insert(task.task_id, head);
    Ok(TaskOutcome {
        task_id: task.task_id,
        mask: outcome.mask,
        score_source: source,
        scores,
        pruned: outcome.pruned,
        restored: outcome.restored,
        partition_sizes: sizes,
        stage1: stage.fit,
        val_before_finetune: val_before,
        finetune,
        available,
        biased: Some(stage.snapshot),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, BiasSpec, SplitSizes};

    fn tiny_stream(tasks: usize) -> crate::datagen::TaskStream {
        let spec = BiasSpec {
            num_tasks: tasks,
            classes_per_task: vec![2; tasks],
            samples_per_class: SplitSizes { train: 24, val: 6, test: 8 },
            ..BiasSpec::default()
        };
        generate(&spec).unwrap()
    }

    fn quick() -> PipelineConfig {
        PipelineConfig { train: TrainConfig { stage1_epochs: 2, finetune_epochs: 1, ..TrainConfig::default() }, ..Default::default() }
    }

    #[test]
    fn zero_cache_matches_plain_ce_finetune() {
        let stream = tiny_stream(1);
        let task = &stream.tasks[0];
        let cfg = NetworkConfig::default();
        let reg = UnitRegistry::new(&cfg);
        let mask = TaskMask { task_id: 1, mask: ChannelMask::full(&cfg) };
        let mut zeros = SampleWeightCache::new();
        for r in &task.train {
            zeros.insert(r.id, 0.0).unwrap();
        }
        let run = |pcfg: &PipelineConfig| {
            let mut store = ParamStore::init(&cfg).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut head = TaskHead::new(&cfg, 1, task.classes.clone(), &mut rng);
            finetune_debiased(&cfg, &mut store, &mut head, &mask, &reg, task, 2, &zeros, pcfg, &mut rng).unwrap();
            (store.fingerprint(), head.fingerprint())
        };
        let weighted = quick();
        let mut plain = quick();
        plain.ablations.plain_ce_finetune = true;
        assert_eq!(run(&weighted), run(&plain));
    }

    #[test]
    fn zero_finetune_epochs_leave_the_net_unchanged() {
        let stream = tiny_stream(1);
        let task = &stream.tasks[0];
        let cfg = NetworkConfig::default();
        let reg = UnitRegistry::new(&cfg);
        let mut store = ParamStore::init(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut head = TaskHead::new(&cfg, 1, task.classes.clone(), &mut rng);
        let before = (store.layers.clone(), head.clone());
        let mut pcfg = quick();
        pcfg.train.finetune_epochs = 0;
        let mask = TaskMask { task_id: 1, mask: ChannelMask::full(&cfg) };
        let rep = finetune_debiased(&cfg, &mut store, &mut head, &mask, &reg, task, 2, &SampleWeightCache::new(), &pcfg, &mut rng).unwrap();
        assert_eq!(rep.epochs_run, 0);
        assert_eq!(before.0, store.layers);
        assert_eq!(before.1, head);
    }

    #[test]
    fn frozen_trunk_only_moves_the_head() {
        let stream = tiny_stream(1);
        let task = &stream.tasks[0];
        let cfg = NetworkConfig::default();
        let mut store = ParamStore::init(&cfg).unwrap();
        store.freeze_all();
        let mut reg = UnitRegistry::new(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut dummy = TaskHead::new(&cfg, 99, vec![100], &mut rng);
        reg.commit_task(&TaskMask { task_id: 99, mask: ChannelMask::full(&cfg) }, &mut store, &mut dummy).unwrap();
        let mut head = TaskHead::new(&cfg, 1, task.classes.clone(), &mut rng);
        let (layers, head0) = (store.layers.clone(), head.clone());
        train_biased_stage(&cfg, &mut store, &reg, &mut head, None, task, &quick(), &mut rng).unwrap();
        assert_eq!(layers, store.layers);
        assert_ne!(head0.out.weight, head.out.weight);
    }

    #[test]
    fn no_kt_masks_are_disjoint() {
        let stream = tiny_stream(2);
        let mut pcfg = quick();
        pcfg.ablations.no_kt = true;
        let mut learner = ContinualLearner::new(NetworkConfig::default(), 1).unwrap();
        let a = learner.learn_task(&stream.tasks[0], 2, &pcfg).unwrap();
        let b = learner.learn_task(&stream.tasks[1], 2, &pcfg).unwrap();
        assert!(a.mask.kept_units().is_disjoint(&b.mask.kept_units()));
    }

    #[test]
    fn committed_task_is_unchanged_by_later_training() {
        let stream = tiny_stream(2);
        let pcfg = quick();
        let mut learner = ContinualLearner::new(NetworkConfig::default(), 5).unwrap();
        learner.learn_task(&stream.tasks[0], 2, &pcfg).unwrap();
        let probe: Vec<&[f32]> = stream.tasks[0].test.iter().take(8).map(|r| r.image.as_slice()).collect();
        let before = learner.task_logits(1, &probe).unwrap();
        learner.learn_task(&stream.tasks[1], 2, &pcfg).unwrap();
        let after = learner.task_logits(1, &probe).unwrap();
        let bits = |v: &Vec<Vec<f64>>| v.iter().flatten().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&before), bits(&after));
        assert!(matches!(learner.learn_task(&stream.tasks[1], 2, &pcfg), Err(SubnetError::State(_))));
    }
}
