use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{generate, ingest_csv, IngestError, SampleRecord, TaskData, TaskStream};
use crate::inference::{evaluate_stream, EvalOptions, InferenceError, JointModel, SeparateModels, SharedTrunkModel};
use crate::metrics::{attribute_probe, pooled_features, MetricError, MetricsReport, ProbeConfig};
use crate::nn::{ChannelMask, NetworkConfig, NnError, ParamStore, Snapshot, TaskHead};
use crate::subnet::{train_ce, ContinualLearner, SubnetError, TaskOutcome, TrainConfig};

use super::checkpoint::{save_checkpoint, CheckpointError, CheckpointFile, RunPosition, FORMAT_VERSION};
use super::config::{ConfigError, DataSource, ExperimentConfig, Method};
use super::report::{rows_from_report, write_rows_csv, ExperimentSummary, ReportRow, RunSummary};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("data: {0}")]
    Data(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Subnet(#[from] SubnetError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.to_path_buf(), source }
}

pub fn load_stream(config: &ExperimentConfig) -> Result<TaskStream, HarnessError> {
    match &config.data {
        DataSource::Synthetic(spec) => generate(spec).map_err(HarnessError::Data),
        DataSource::Csv { root, metadata } => Ok(ingest_csv(root, metadata, config.network.input_shape)?),
    }
}

/// Task presentation orders: the stream's own order first, then distinct seeded
/// permutations while unused ones remain.
pub fn task_orders(task_ids: &[u32], count: usize) -> Vec<Vec<u32>> {
    let total_perms: usize = (1..=task_ids.len()).product();
    let mut orders = vec![task_ids.to_vec()];
    let mut k = 1u64;
    while orders.len() < count {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 + k);
        let mut p = task_ids.to_vec();
        p.shuffle(&mut rng);
        if orders.len() >= total_perms || !orders.contains(&p) {
            orders.push(p);
        }
        k += 1;
    }
    orders
}

/// Probe AUC (mean over group pairs) of the attribute from pooled features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub task: u32,
    /// Features of the stage-1 biased network (biaspruner only).
    pub biased_auc: Option<f64>,
    /// Features of the final model for this task.
    pub final_auc: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResult {
    pub method: String,
    pub seed: u64,
    pub order: usize,
    pub task_order: Vec<u32>,
    pub rows: Vec<ReportRow>,
    pub final_report: MetricsReport,
    pub probe: Vec<ProbeRecord>,
    pub outcomes: Vec<TaskOutcome>,
}

impl RunResult {
    pub fn summary(&self) -> RunSummary {
        RunSummary::from_final_rows(self.seed, self.order, self.task_order.clone(), &self.rows)
    }
}

fn attrs(records: &[SampleRecord]) -> Vec<usize> {
    records.iter().map(|r| r.attribute).collect()
}

/// Mean one-vs-one AUC of a linear attribute probe on `snapshot`'s features: trained on
/// the task's train split, scored on its test split.
pub fn probe_snapshot(snapshot: &Snapshot, mask: Option<&ChannelMask>, task: &TaskData, cfg: &ProbeConfig, seed: u64) -> Result<f64, HarnessError> {
    let train = pooled_features(snapshot, mask, &task.train)?;
    let test = pooled_features(snapshot, mask, &task.test)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((task.task_id as u64) << 32) ^ 0x9e37_79b9);
    let aucs = attribute_probe(&train, &attrs(&task.train), &test, &attrs(&task.test), cfg, &mut rng)?;
    if aucs.is_empty() {
        return Err(MetricError::Undefined("no group pair present in the test split".into()).into());
    }
    Ok(aucs.values().sum::<f64>() / aucs.len() as f64)
}

fn method_label(config: &ExperimentConfig) -> String {
    let abl = config.ablations.names();
    if abl.is_empty() {
        config.method.to_string()
    } else {
        format!("{}+{}", config.method, abl.join("+"))
    }
}

fn network_for(config: &ExperimentConfig, seed: u64) -> NetworkConfig {
    NetworkConfig { seed, ..config.network.clone() }
}

fn baseline_train_config(config: &ExperimentConfig) -> TrainConfig {
    config.pipeline().train
}

struct RunContext<'a> {
    config: &'a ExperimentConfig,
    stream: &'a TaskStream,
    seed: u64,
    order_index: usize,
    order: &'a [u32],
    label: String,
    checkpoint_dir: Option<PathBuf>,
}

impl RunContext<'_> {
    fn task(&self, id: u32) -> Result<&TaskData, HarnessError> {
        self.stream.task(id).ok_or_else(|| HarnessError::Data(format!("task {id} missing from the stream")))
    }

    fn eval(&self) -> EvalOptions {
        self.config.eval
    }

    fn rows(&self, step: usize, report: &MetricsReport) -> Vec<ReportRow> {
        rows_from_report(&self.label, self.seed, self.order_index, step, report, self.stream.num_groups)
    }
}

/// Attaches final probe AUCs to the last step's rows.
fn attach_probe(rows: &mut [ReportRow], probe: &[ProbeRecord]) {
    let last = rows.iter().map(|r| r.step).max().unwrap_or(0);
    for r in rows.iter_mut().filter(|r| r.step == last) {
        r.probe_auc = probe.iter().find(|p| p.task == r.task).map(|p| p.final_auc);
    }
}

fn run_biaspruner(ctx: &RunContext<'_>) -> Result<RunResult, HarnessError> {
    let cfg = ctx.config;
    let pcfg = cfg.pipeline();
    let g = ctx.stream.num_groups;
    let mut learner = ContinualLearner::new(network_for(cfg, ctx.seed), ctx.seed)?;
    let mut rows = Vec::new();
    let mut seen: Vec<&TaskData> = Vec::new();
    let mut outcomes = Vec::new();
    let mut report = None;
    for (step, id) in ctx.order.iter().enumerate() {
        let task = ctx.task(*id)?;
        log::info!("[{} seed {} order {}] task {} ({}/{})", ctx.label, ctx.seed, ctx.order_index, id, step + 1, ctx.order.len());
        let outcome = learner.learn_task(task, g, &pcfg)?;
        if let Some(dir) = &ctx.checkpoint_dir {
            let file = CheckpointFile {
                version: FORMAT_VERSION,
                config_hash: cfg.training_hash(),
                position: RunPosition { seed: ctx.seed, order: ctx.order_index, completed: ctx.order[..=step].to_vec() },
                learner: learner.clone(),
            };
            save_checkpoint(&dir.join(format!("seed{}_order{}_step{}.ckpt", ctx.seed, ctx.order_index, step + 1)), &file)?;
        }
        outcomes.push(outcome);
        seen.push(task);
        let r = evaluate_stream(&learner, &seen, g, &ctx.eval())?;
        rows.extend(ctx.rows(step + 1, &r));
        report = Some(r);
    }
    let mut probe = Vec::new();
    if cfg.probe.enabled {
        for outcome in &outcomes {
            let task = ctx.task(outcome.task_id)?;
            let biased = match &outcome.biased {
                Some(s) => Some(probe_snapshot(s, Some(&outcome.available), task, &cfg.probe.probe, ctx.seed)?),
                None => None,
            };
            let snap = Snapshot::new(&learner.config, &learner.store, &learner.heads[&outcome.task_id]);
            let final_auc = probe_snapshot(&snap, Some(&learner.masks[&outcome.task_id].mask), task, &cfg.probe.probe, ctx.seed)?;
            probe.push(ProbeRecord { task: outcome.task_id, biased_auc: biased, final_auc });
        }
        attach_probe(&mut rows, &probe);
    }
    Ok(RunResult {
        method: ctx.label.clone(),
        seed: ctx.seed,
        order: ctx.order_index,
        task_order: ctx.order.to_vec(),
        rows,
        final_report: report.expect("at least one task"),
        probe,
        outcomes,
    })
}

fn run_seqft(ctx: &RunContext<'_>) -> Result<RunResult, HarnessError> {
    let cfg = ctx.config;
    let net = network_for(cfg, ctx.seed);
    let g = ctx.stream.num_groups;
    let mut model = SharedTrunkModel { store: ParamStore::init(&net)?, config: net, heads: BTreeMap::new() };
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let train_cfg = baseline_train_config(cfg);
    let mut rows = Vec::new();
    let mut seen = Vec::new();
    let mut report = None;
    for (step, id) in ctx.order.iter().enumerate() {
        let task = ctx.task(*id)?;
        let mut head = TaskHead::new(&model.config, *id, task.classes.clone(), &mut rng);
        train_ce(&model.config, &mut model.store, &mut head, None, &task.train, &task.val, &train_cfg, &mut rng)?;
        model.heads.insert(*id, head);
        seen.push(task);
        let r = evaluate_stream(&model, &seen, g, &ctx.eval())?;
        rows.extend(ctx.rows(step + 1, &r));
        report = Some(r);
    }
    let mut probe = Vec::new();
    if cfg.probe.enabled {
        for task in &seen {
            let snap = Snapshot::new(&model.config, &model.store, &model.heads[&task.task_id]);
            probe.push(ProbeRecord { task: task.task_id, biased_auc: None, final_auc: probe_snapshot(&snap, None, task, &cfg.probe.probe, ctx.seed)? });
        }
        attach_probe(&mut rows, &probe);
    }
    Ok(RunResult {
        method: ctx.label.clone(),
        seed: ctx.seed,
        order: ctx.order_index,
        task_order: ctx.order.to_vec(),
        rows,
        final_report: report.expect("at least one task"),
        probe,
        outcomes: Vec::new(),
    })
}

/// Trains one task in isolation: fresh trunk from `config.seed`, fresh head and shuffling
/// from `seed`.
pub fn train_isolated(config: &NetworkConfig, task: &TaskData, train_cfg: &TrainConfig, seed: u64) -> Result<(ParamStore, TaskHead), HarnessError> {
    let mut store = ParamStore::init(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut head = TaskHead::new(config, task.task_id, task.classes.clone(), &mut rng);
    train_ce(config, &mut store, &mut head, None, &task.train, &task.val, train_cfg, &mut rng)?;
    Ok((store, head))
}

fn run_single(ctx: &RunContext<'_>) -> Result<RunResult, HarnessError> {
    let cfg = ctx.config;
    let net = network_for(cfg, ctx.seed);
    let g = ctx.stream.num_groups;
    let train_cfg = baseline_train_config(cfg);
    let mut model = SeparateModels { config: net.clone(), models: BTreeMap::new() };
    // Separate models never interact, so SINGLE is evaluated with the true task.
    let eval = EvalOptions { oracle: true, ..ctx.eval() };
    let mut rows = Vec::new();
    let mut seen = Vec::new();
    let mut report = None;
    for (step, id) in ctx.order.iter().enumerate() {
        let task = ctx.task(*id)?;
        model.models.insert(*id, train_isolated(&net, task, &train_cfg, ctx.seed)?);
        seen.push(task);
        let r = evaluate_stream(&model, &seen, g, &eval)?;
        rows.extend(ctx.rows(step + 1, &r));
        report = Some(r);
    }
    let mut probe = Vec::new();
    if cfg.probe.enabled {
        for task in &seen {
            let (store, head) = &model.models[&task.task_id];
            let snap = Snapshot::new(&net, store, head);
            probe.push(ProbeRecord { task: task.task_id, biased_auc: None, final_auc: probe_snapshot(&snap, None, task, &cfg.probe.probe, ctx.seed)? });
        }
        attach_probe(&mut rows, &probe);
    }
    Ok(RunResult {
        method: ctx.label.clone(),
        seed: ctx.seed,
        order: ctx.order_index,
        task_order: ctx.order.to_vec(),
        rows,
        final_report: report.expect("at least one task"),
        probe,
        outcomes: Vec::new(),
    })
}

/// Pools every task of `tasks` into one dataset with a head over the union of classes.
pub fn pooled_task(tasks: &[&TaskData]) -> TaskData {
    TaskData {
        task_id: 0,
        classes: tasks.iter().flat_map(|t| t.classes.iter().copied()).collect(),
        train: tasks.iter().flat_map(|t| t.train.iter().cloned()).collect(),
        val: tasks.iter().flat_map(|t| t.val.iter().cloned()).collect(),
        test: tasks.iter().flat_map(|t| t.test.iter().cloned()).collect(),
    }
}

fn run_joint(ctx: &RunContext<'_>) -> Result<RunResult, HarnessError> {
    let cfg = ctx.config;
    let net = network_for(cfg, ctx.seed);
    let g = ctx.stream.num_groups;
    let tasks: Vec<&TaskData> = ctx.order.iter().map(|id| ctx.task(*id)).collect::<Result<_, _>>()?;
    let pooled = pooled_task(&tasks);
    let (store, head) = train_isolated(&net, &pooled, &baseline_train_config(cfg), ctx.seed)?;
    let model = JointModel {
        config: net.clone(),
        store,
        head,
        task_classes: tasks.iter().map(|t| (t.task_id, t.classes.clone())).collect(),
    };
    let report = evaluate_stream(&model, &tasks, g, &ctx.eval())?;
    let mut rows = ctx.rows(tasks.len(), &report);
    let mut probe = Vec::new();
    if cfg.probe.enabled {
        let snap = Snapshot::new(&net, &model.store, &model.head);
        for task in &tasks {
            probe.push(ProbeRecord { task: task.task_id, biased_auc: None, final_auc: probe_snapshot(&snap, None, task, &cfg.probe.probe, ctx.seed)? });
        }
        attach_probe(&mut rows, &probe);
    }
    Ok(RunResult {
        method: ctx.label.clone(),
        seed: ctx.seed,
        order: ctx.order_index,
        task_order: ctx.order.to_vec(),
        rows,
        final_report: report,
        probe,
        outcomes: Vec::new(),
    })
}

/// One (seed, order) run of the configured method.
pub fn run_once(config: &ExperimentConfig, stream: &TaskStream, seed: u64, order_index: usize, order: &[u32], checkpoint_dir: Option<PathBuf>) -> Result<RunResult, HarnessError> {
    let ctx = RunContext { config, stream, seed, order_index, order, label: method_label(config), checkpoint_dir };
    match config.method {
        Method::Biaspruner => run_biaspruner(&ctx),
        Method::Seqft => run_seqft(&ctx),
        Method::Single => run_single(&ctx),
        Method::Joint => run_joint(&ctx),
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub dir: PathBuf,
    pub runs: Vec<RunResult>,
    pub summary: ExperimentSummary,
}

/// Runs every (seed, order) pair and writes `results.csv`, `summary.json`,
/// `probe.json`, `outcomes.json` and the resolved `config.toml` under
/// `output_dir/name`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput, HarnessError> {
    config.validate()?;
    let stream = load_stream(config)?;
    run_experiment_on(config, &stream)
}

/// [`run_experiment`] on an already loaded stream.
pub fn run_experiment_on(config: &ExperimentConfig, stream: &TaskStream) -> Result<ExperimentOutput, HarnessError> {
    config.validate()?;
    let dir = config.output_dir.join(&config.name);
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let ckpt_dir = (config.checkpoints && config.method == Method::Biaspruner).then(|| dir.join("checkpoints"));
    let orders = task_orders(&stream.task_ids(), config.task_orders);
    let mut runs = Vec::new();
    for seed in &config.seeds {
        for (k, order) in orders.iter().enumerate() {
            runs.push(run_once(config, stream, *seed, k, order, ckpt_dir.clone())?);
        }
    }
    let rows: Vec<ReportRow> = runs.iter().flat_map(|r| r.rows.iter().cloned()).collect();
    let csv_path = dir.join("results.csv");
    let file = std::fs::File::create(&csv_path).map_err(io_err(&csv_path))?;
    write_rows_csv(std::io::BufWriter::new(file), &rows, stream.num_groups)?;

    let composition = runs.first().map_or("pure".to_string(), |r| r.final_report.batch_composition.clone());
    let summary = ExperimentSummary::new(
        &config.name,
        &method_label(config),
        config.ablations.names().iter().map(|s| s.to_string()).collect(),
        runs.iter().map(RunResult::summary).collect(),
        &composition,
    );
    let write_json = |name: &str, value: &dyn erased::Json| -> Result<(), HarnessError> {
        let p = dir.join(name);
        std::fs::write(&p, value.to_json()).map_err(io_err(&p))
    };
    write_json("summary.json", &summary)?;
    let probe: Vec<serde_json::Value> = runs
        .iter()
        .map(|r| serde_json::json!({ "seed": r.seed, "order": r.order, "tasks": r.probe }))
        .collect();
    write_json("probe.json", &probe)?;
    let outcomes: Vec<serde_json::Value> = runs
        .iter()
        .filter(|r| !r.outcomes.is_empty())
        .map(|r| serde_json::json!({ "seed": r.seed, "order": r.order, "tasks": r.outcomes }))
        .collect();
    write_json("outcomes.json", &outcomes)?;
    let cfg_path = dir.join("config.toml");
    std::fs::write(&cfg_path, config.to_toml_string()).map_err(io_err(&cfg_path))?;
    Ok(ExperimentOutput { dir, runs, summary })
}

mod erased {
    pub trait Json {
        fn to_json(&self) -> String;
    }

    impl<T: serde::Serialize> Json for T {
        fn to_json(&self) -> String {
            serde_json::to_string_pretty(self).expect("serializable") + "\n"
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orders_are_distinct_and_start_natural() {
        let o = task_orders(&[1, 2, 3], 3);
        assert_eq!(o[0], vec![1, 2, 3]);
        assert_eq!(o.len(), 3);
        assert_ne!(o[1], o[0]);
        assert_ne!(o[2], o[1]);
        assert_ne!(o[2], o[0]);
        let mut sorted = o[2].clone();
        sorted.sort();
        assert_eq!(sorted, vec![1, 2, 3]);
        // More orders than permutations still terminates.
        assert_eq!(task_orders(&[1, 2], 4).len(), 4);
    }
}
