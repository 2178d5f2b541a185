use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use debias_cl::datagen::write_stream;
use debias_cl::harness::{
    load_checkpoint, load_stream, probe_snapshot, read_rows_csv, render_svg, run_experiment, CheckpointError, ConfigError,
    DataSource, ExperimentConfig, HarnessError, Method, ReportRow, RunSummary, Stat, OUTPUT_DIR_ENV,
};
use debias_cl::inference::{evaluate_stream, EvalOptions, ScoreMode};
use debias_cl::nn::Snapshot;

#[derive(Parser)]
#[command(name = "debias-cl", version, about = "Bias-aware continual learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic task stream and write it as images plus metadata CSV.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Destination directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a method over every (seed, task order) pair and write reports.
    Train(TrainArgs),
    /// Evaluate a checkpointed learner on the test splits of the configured stream.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Use the true task id instead of max-output selection.
        #[arg(long)]
        oracle: bool,
        #[arg(long, value_enum, default_value_t = Score::Raw)]
        score: Score,
    },
    /// Attribute-probe AUC of every committed subnetwork in a checkpoint.
    Probe {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Summarize a results CSV and draw an SVG chart of one metric per step.
    Report {
        /// Run directory holding results.csv, or the CSV itself.
        path: PathBuf,
        #[arg(long, default_value = "bacc")]
        metric: String,
        /// SVG output path; defaults to <metric>.svg next to the CSV.
        #[arg(long)]
        svg: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig, ConfigError> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        cfg.apply_env();
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Score {
    Raw,
    Softmax,
}

#[derive(Clone, Copy, ValueEnum)]
enum Ablation {
    CeForGce,
    RandomPrune,
    PlainCeFinetune,
    NoKt,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Run seed; repeat for a sweep.
    #[arg(long, required = true)]
    seed: Vec<u64>,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    name: Option<String>,
    #[arg(long, env = OUTPUT_DIR_ENV)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    task_orders: Option<usize>,
    #[arg(long, value_enum)]
    ablation: Vec<Ablation>,
    #[arg(long)]
    q: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    stage1_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    finetune_epochs: Option<usize>,
    /// Write a checkpoint after every committed task.
    #[arg(long)]
    checkpoints: bool,
    #[arg(long)]
    no_probe: bool,
}

impl TrainArgs {
    fn resolve(&self) -> Result<ExperimentConfig, ConfigError> {
        let mut cfg = self.config.load()?;
        cfg.seeds = self.seed.clone();
        if let Some(m) = self.method {
            cfg.method = m;
        }
        if let Some(n) = &self.name {
            cfg.name = n.clone();
        }
        if let Some(d) = &self.output_dir {
            cfg.output_dir = d.clone();
        }
        if let Some(k) = self.task_orders {
            cfg.task_orders = k;
        }
        for a in &self.ablation {
            match a {
                Ablation::CeForGce => cfg.ablations.ce_for_gce = true,
                Ablation::RandomPrune => cfg.ablations.random_prune = true,
                Ablation::PlainCeFinetune => cfg.ablations.plain_ce_finetune = true,
                Ablation::NoKt => cfg.ablations.no_kt = true,
            }
        }
        let h = &mut cfg.hyper;
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { h.$f = v; } )* };
        }
        set!(q, tau, gamma, batch_size, learning_rate, stage1_epochs, patience, finetune_epochs);
        cfg.checkpoints |= self.checkpoints;
        if self.no_probe {
            cfg.probe.enabled = false;
        }
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(c) = cause.downcast_ref::<CheckpointError>() {
            return c.exit_code() as u8;
        }
        if let Some(HarnessError::Checkpoint(c)) = cause.downcast_ref::<HarnessError>() {
            return c.exit_code() as u8;
        }
        if cause.downcast_ref::<ConfigError>().is_some() || matches!(cause.downcast_ref::<HarnessError>(), Some(HarnessError::Config(_))) {
            return 2;
        }
    }
    1
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::GenData { config, out } => {
            let cfg = config.load()?;
            if !matches!(cfg.data, DataSource::Synthetic(_)) {
                bail!("gen-data needs a synthetic data source");
            }
            cfg.validate()?;
            let stream = load_stream(&cfg)?;
            let meta = write_stream(&stream, &out).with_context(|| format!("writing {}", out.display()))?;
            println!("{}", meta.display());
        }
        Command::Train(args) => {
            let cfg = args.resolve()?;
            let out = run_experiment(&cfg)?;
            println!("{}", out.dir.display());
            for (metric, stat) in &out.summary.metrics {
                println!("{metric:>10}  median {:.4}  mean {:.4} ± {:.4}  (n={})", stat.median, stat.mean, stat.std, stat.n);
            }
        }
        Command::Eval { config, checkpoint, oracle, score } => {
            let cfg = config.load()?;
            let file = load_checkpoint(&checkpoint, Some(&cfg.training_hash()))?;
            let stream = load_stream(&cfg)?;
            let tasks = file
                .position
                .completed
                .iter()
                .map(|id| stream.task(*id).with_context(|| format!("task {id} not in the configured stream")))
                .collect::<anyhow::Result<Vec<_>>>()?;
            let mode = match score {
                Score::Raw => ScoreMode::RawLogits,
                Score::Softmax => ScoreMode::Softmax,
            };
            let opts = EvalOptions { oracle, mode, ..cfg.eval };
            let report = evaluate_stream(&file.learner, &tasks, stream.num_groups, &opts)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Probe { config, checkpoint, seed } => {
            let cfg = config.load()?;
            let file = load_checkpoint(&checkpoint, Some(&cfg.training_hash()))?;
            let stream = load_stream(&cfg)?;
            let l = &file.learner;
            let mut out = serde_json::Map::new();
            for (id, mask) in &l.masks {
                let task = stream.task(*id).with_context(|| format!("task {id} not in the configured stream"))?;
                let snap = Snapshot::new(&l.config, &l.store, &l.heads[id]);
                let auc = probe_snapshot(&snap, Some(&mask.mask), task, &cfg.probe.probe, seed)?;
                out.insert(id.to_string(), auc.into());
            }
            println!("{}", serde_json::to_string_pretty(&out)?);
        }
        Command::Report { path, metric, svg } => report(&path, &metric, svg)?,
    }
    Ok(())
}

fn report(path: &Path, metric: &str, svg: Option<PathBuf>) -> anyhow::Result<()> {
    let csv = if path.is_dir() { path.join("results.csv") } else { path.to_path_buf() };
    let rows = read_rows_csv(&csv).map_err(anyhow::Error::msg)?;
    if rows.is_empty() {
        bail!("{} holds no rows", csv.display());
    }
    let mut methods: Vec<&str> = rows.iter().map(|r| r.method.as_str()).collect();
    methods.sort();
    methods.dedup();
    println!("{:<40} {:>6} {:>10} {:>10} {:>10}", "method", "runs", "median", "mean", "std");
    for m in &methods {
        let mine: Vec<ReportRow> = rows.iter().filter(|r| r.method == *m).cloned().collect();
        let mut runs: Vec<(u64, usize)> = mine.iter().map(|r| (r.seed, r.order)).collect();
        runs.sort();
        runs.dedup();
        let values: Vec<f64> = runs
            .iter()
            .filter_map(|(s, o)| {
                let run_rows: Vec<ReportRow> = mine.iter().filter(|r| r.seed == *s && r.order == *o).cloned().collect();
                RunSummary::from_final_rows(*s, *o, Vec::new(), &run_rows).metrics.get(metric).copied()
            })
            .collect();
        match Stat::of(&values) {
            Some(st) => println!("{m:<40} {:>6} {:>10.4} {:>10.4} {:>10.4}", st.n, st.median, st.mean, st.std),
            None => println!("{m:<40} {:>6} {:>10} {:>10} {:>10}", 0, "-", "-", "-"),
        }
    }
    let svg_path = svg.unwrap_or_else(|| csv.with_file_name(format!("{metric}.svg")));
    std::fs::write(&svg_path, render_svg(&rows, metric)).with_context(|| format!("writing {}", svg_path.display()))?;
    println!("chart: {}", svg_path.display());
    Ok(())
}
