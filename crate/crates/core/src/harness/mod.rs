//! Experiment orchestration: configs, runs, checkpoints and reports.

mod checkpoint;
mod config;
mod report;
mod run;

pub use checkpoint::{
    decode, encode, load_checkpoint, save_checkpoint, CheckpointError, CheckpointFile, RunPosition, FORMAT_VERSION, MAGIC,
};
pub use config::{ConfigError, DataSource, ExperimentConfig, Hyper, Method, ProbeSettings, OUTPUT_DIR_ENV};
pub use report::{
    csv_header, median, read_rows_csv, render_svg, rows_from_report, write_rows_csv, ExperimentSummary, ReportRow,
    RunSummary, Stat,
};
pub use run::{
    load_stream, pooled_task, probe_snapshot, run_experiment, run_experiment_on, run_once, task_orders, train_isolated,
    ExperimentOutput, HarnessError, ProbeRecord, RunResult,
};
