use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::metrics::{MetricsReport, DPR_DEFINITION, EOD_DEFINITION};

/// One CSV line: metrics of `task` after training step `step` (1-based).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub seed: u64,
    pub order: usize,
    pub step: usize,
    pub task: u32,
    pub f1: f64,
    pub bacc: f64,
    /// Per-group balanced accuracy, indexed by group; `None` when a group is absent.
    pub acc_g: Vec<Option<f64>>,
    pub dpr: Option<f64>,
    pub eod: Option<f64>,
    pub tsel_acc: Option<f64>,
    pub probe_auc: Option<f64>,
}

pub fn rows_from_report(method: &str, seed: u64, order: usize, step: usize, report: &MetricsReport, num_groups: usize) -> Vec<ReportRow> {
    report
        .per_task
        .iter()
        .map(|m| ReportRow {
            method: method.to_string(),
            seed,
            order,
            step,
            task: m.task_id,
            f1: m.macro_f1,
            bacc: m.balanced_acc,
            acc_g: (0..num_groups).map(|g| m.per_group_acc.get(&g).copied()).collect(),
            dpr: m.dpr,
            eod: m.eod,
            tsel_acc: m.task_selection_acc,
            probe_auc: m.mean_probe_auc(),
        })
        .collect()
}

fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        String::new()
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

pub fn csv_header(num_groups: usize) -> Vec<String> {
    let mut h: Vec<String> = ["method", "seed", "order", "step", "task", "f1", "bacc"].iter().map(|s| s.to_string()).collect();
    h.extend((0..num_groups).map(|g| format!("acc_g{g}")));
    h.extend(["dpr", "eod", "tsel_acc", "probe_auc"].iter().map(|s| s.to_string()));
    h
}

pub fn write_rows_csv<W: std::io::Write>(out: W, rows: &[ReportRow], num_groups: usize) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(csv_header(num_groups))?;
    for r in rows {
        let mut rec = vec![r.method.clone(), r.seed.to_string(), r.order.to_string(), r.step.to_string(), r.task.to_string(), num(r.f1), num(r.bacc)];
        rec.extend((0..num_groups).map(|g| opt(r.acc_g.get(g).copied().flatten())));
        rec.extend([opt(r.dpr), opt(r.eod), opt(r.tsel_acc), opt(r.probe_auc)]);
        w.write_record(rec)?;
    }
    w.flush()?;
    Ok(())
}

fn parse_opt(s: &str) -> Result<Option<f64>, String> {
    if s.is_empty() {
        Ok(None)
    } else {
        s.parse().map(Some).map_err(|_| format!("bad number {s:?}"))
    }
}

/// Reads rows written by [`write_rows_csv`].
pub fn read_rows_csv(path: &Path) -> Result<Vec<ReportRow>, String> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let header: Vec<String> = rdr.headers().map_err(|e| e.to_string())?.iter().map(str::to_string).collect();
    let col = |name: &str| header.iter().position(|h| h == name).ok_or_else(|| format!("{}: missing column {name}", path.display()));
    let groups: Vec<usize> = header.iter().enumerate().filter(|(_, h)| h.starts_with("acc_g")).map(|(i, _)| i).collect();
    let idx = ["method", "seed", "order", "step", "task", "f1", "bacc", "dpr", "eod", "tsel_acc", "probe_auc"]
        .iter()
        .map(|n| col(n))
        .collect::<Result<Vec<_>, _>>()?;
    let mut rows = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| e.to_string())?;
        let f = |i: usize| rec.get(idx[i]).unwrap_or("");
        let int = |i: usize| f(i).parse::<u64>().map_err(|_| format!("row {}: bad integer {:?}", line + 1, f(i)));
        rows.push(ReportRow {
            method: f(0).to_string(),
            seed: int(1)?,
            order: int(2)? as usize,
            step: int(3)? as usize,
            task: int(4)? as u32,
            f1: parse_opt(f(5))?.unwrap_or(f64::NAN),
            bacc: parse_opt(f(6))?.unwrap_or(f64::NAN),
            acc_g: groups.iter().map(|i| parse_opt(rec.get(*i).unwrap_or(""))).collect::<Result<_, _>>()?,
            dpr: parse_opt(f(7))?,
            eod: parse_opt(f(8))?,
            tsel_acc: parse_opt(f(9))?,
            probe_auc: parse_opt(f(10))?,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    pub n: usize,
}

impl Stat {
    /// Sample statistics; `None` for an empty input.
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 { (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
        Some(Stat { mean, std, median: median(values), n })
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Task-averaged metrics of one run at its last step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub order: usize,
    pub task_order: Vec<u32>,
    pub metrics: BTreeMap<String, f64>,
}

impl RunSummary {
    pub fn from_final_rows(seed: u64, order: usize, task_order: Vec<u32>, rows: &[ReportRow]) -> Self {
        let last = rows.iter().map(|r| r.step).max().unwrap_or(0);
        let fin: Vec<&ReportRow> = rows.iter().filter(|r| r.step == last).collect();
        let mut metrics = BTreeMap::new();
        let mut put = |name: String, vals: Vec<f64>| {
            if !vals.is_empty() {
                metrics.insert(name, vals.iter().sum::<f64>() / vals.len() as f64);
            }
        };
        put("f1".into(), fin.iter().map(|r| r.f1).collect());
        put("bacc".into(), fin.iter().map(|r| r.bacc).collect());
        put("dpr".into(), fin.iter().filter_map(|r| r.dpr).collect());
        put("eod".into(), fin.iter().filter_map(|r| r.eod).collect());
        put("tsel_acc".into(), fin.iter().filter_map(|r| r.tsel_acc).collect());
        put("probe_auc".into(), fin.iter().filter_map(|r| r.probe_auc).collect());
        let groups = fin.iter().map(|r| r.acc_g.len()).max().unwrap_or(0);
        for g in 0..groups {
            put(format!("acc_g{g}"), fin.iter().filter_map(|r| r.acc_g.get(g).copied().flatten()).collect());
        }
        Self { seed, order, task_order, metrics }
    }
}

/// Mean ± std (and median) of final task-averaged metrics across all runs of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub name: String,
    pub method: String,
    pub ablations: Vec<String>,
    pub runs: Vec<RunSummary>,
    pub metrics: BTreeMap<String, Stat>,
    pub dpr_definition: String,
    pub eod_definition: String,
    pub batch_composition: String,
}

impl ExperimentSummary {
    pub fn new(name: &str, method: &str, ablations: Vec<String>, runs: Vec<RunSummary>, batch_composition: &str) -> Self {
        let mut keys: Vec<String> = runs.iter().flat_map(|r| r.metrics.keys().cloned()).collect();
        keys.sort();
        keys.dedup();
        let metrics = keys
            .into_iter()
            .filter_map(|k| {
                let vals: Vec<f64> = runs.iter().filter_map(|r| r.metrics.get(&k).copied()).collect();
                Stat::of(&vals).map(|s| (k, s))
            })
            .collect();
        Self {
            name: name.to_string(),
            method: method.to_string(),
            ablations,
            runs,
            metrics,
            dpr_definition: DPR_DEFINITION.to_string(),
            eod_definition: EOD_DEFINITION.to_string(),
            batch_composition: batch_composition.to_string(),
        }
    }

    /// Median over runs of a final metric.
    pub fn median(&self, metric: &str) -> Option<f64> {
        self.metrics.get(metric).map(|s| s.median)
    }
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

fn metric_of(r: &ReportRow, metric: &str) -> Option<f64> {
    match metric {
        "f1" => Some(r.f1),
        "bacc" => Some(r.bacc),
        "dpr" => r.dpr,
        "eod" => r.eod,
        "tsel_acc" => r.tsel_acc,
        "probe_auc" => r.probe_auc,
        m => m.strip_prefix("acc_g").and_then(|g| g.parse::<usize>().ok()).and_then(|g| r.acc_g.get(g).copied().flatten()),
    }
}

/// Static line chart of `metric` averaged over seen tasks, seeds and orders, one line per
/// method, against the training step.
pub fn render_svg(rows: &[ReportRow], metric: &str) -> String {
    let mut series: BTreeMap<&str, BTreeMap<usize, (f64, usize)>> = BTreeMap::new();
    for r in rows {
        if let Some(v) = metric_of(r, metric).filter(|v| v.is_finite()) {
            let e = series.entry(r.method.as_str()).or_default().entry(r.step).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
    }
    let (w, h, left, right, top, bottom) = (640.0, 400.0, 60.0, 170.0, 30.0, 50.0);
    let max_step = series.values().flat_map(|s| s.keys().copied()).max().unwrap_or(1).max(1);
    let (pw, ph) = (w - left - right, h - top - bottom);
    let x = |step: usize| left + if max_step == 1 { pw / 2.0 } else { (step - 1) as f64 / (max_step - 1) as f64 * pw };
    let y = |v: f64| top + (1.0 - v.clamp(0.0, 1.0)) * ph;

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="14">{metric} after each training step</text>"#, left + pw / 2.0);
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let _ = writeln!(s, r##"<line x1="{left}" x2="{}" y1="{:.1}" y2="{:.1}" stroke="#ddd"/>"##, left + pw, y(v), y(v));
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.1}</text>"#, left - 6.0, y(v) + 4.0);
    }
    for step in 1..=max_step {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{step}</text>"#, x(step), top + ph + 18.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">step</text>"#, left + pw / 2.0, h - 8.0);
    let _ = writeln!(s, r##"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>"##);
    for (i, (method, points)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = points.iter().map(|(st, (sum, n))| format!("{:.1},{:.1}", x(*st), y(sum / *n as f64))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, pts.join(" "));
        for p in &pts {
            let (px, py) = p.split_once(',').expect("point");
            let _ = writeln!(s, r#"<circle cx="{px}" cy="{py}" r="3" fill="{color}"/>"#);
        }
        let ly = top + 14.0 + i as f64 * 18.0;
        let _ = writeln!(s, r#"<line x1="{}" x2="{}" y1="{ly}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, w - right + 10.0, w - right + 30.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, w - right + 36.0, ly + 4.0, xml_escape(method));
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
