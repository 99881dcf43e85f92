//! `cetx report`, plus aggregation helpers shared with the other commands.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Result;
use cetransformer::metrics::EvalReport;
use cetransformer::trainer::TrainTrace;

use crate::manifest::{read_json, read_text, write_text, RunManifest, MANIFEST_FILE};
use crate::train::{REPORT_FILE, TRACE_FILE};
use crate::{seed_dir, Command, ReportArgs};

/// Reports and traces of one run directory, one entry per seed.
#[derive(Debug, Clone)]
pub struct RunReports {
    pub label: String,
    pub dir: PathBuf,
    pub seeds: Vec<u64>,
    pub reports: Vec<Vec<EvalReport>>,
    pub traces: Vec<TrainTrace>,
}

type Metric = (&'static str, fn(&EvalReport) -> Option<f64>);

pub const METRICS: [Metric; 5] = [
    ("sqrt_pehe", |r| r.sqrt_pehe),
    ("ate_error", |r| r.ate_error),
    ("policy_risk", |r| r.policy_risk),
    ("factual_mse", |r| Some(r.factual_mse)),
    ("group_kl", |r| r.group_kl),
];

/// Seed and directory of every seed of a training run.
pub fn seed_dirs(dir: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let manifest = RunManifest::load(&dir.join(MANIFEST_FILE))?;
    let multi = matches!(&manifest.command, Command::Train(a) if a.seeds.is_some());
    Ok(manifest
        .seeds
        .iter()
        .map(|&s| (s, seed_dir(dir, s, multi)))
        .collect())
}

pub fn collect_run(dir: &Path) -> Result<RunReports> {
    let dirs = seed_dirs(dir)?;
    let mut reports = Vec::with_capacity(dirs.len());
    let mut traces = Vec::with_capacity(dirs.len());
    for (_, d) in &dirs {
        reports.push(read_json(&d.join(REPORT_FILE))?);
        traces.push(TrainTrace::parse_csv(&read_text(&d.join(TRACE_FILE))?)?);
    }
    Ok(RunReports {
        label: dir
            .file_name()
            .map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned()),
        dir: dir.to_path_buf(),
        seeds: dirs.iter().map(|(s, _)| *s).collect(),
        reports,
        traces,
    })
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn cell(values: &[f64]) -> String {
    match values.len() {
        0 => "-".into(),
        1 => format!("{:.4}", values[0]),
        _ => {
            let (m, s) = mean_sd(values);
            format!("{m:.4} ± {s:.4}")
        }
    }
}

/// Groups per-seed reports by `(method, split)` keeping first-seen order.
pub fn group_reports<'a>(per_seed: &'a [Vec<EvalReport>]) -> Vec<((String, String), Vec<&'a EvalReport>)> {
    let mut order: Vec<(String, String)> = Vec::new();
    let mut groups: BTreeMap<(String, String), Vec<&EvalReport>> = BTreeMap::new();
    for r in per_seed.iter().flatten() {
        let key = (r.method.clone(), r.split.clone());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    order
        .into_iter()
        .map(|k| {
            let v = groups.remove(&k).unwrap();
            (k, v)
        })
        .collect()
}

fn metric_values(reports: &[&EvalReport], f: fn(&EvalReport) -> Option<f64>) -> Vec<f64> {
    reports.iter().filter_map(|r| f(r)).collect()
}

/// Markdown table with one row per run, method and split; multi-seed
/// cells read `mean ± sd`.
pub fn summary_table(runs: &[RunReports]) -> String {
    let mut out = String::from("| run | method | split | seeds |");
    for (name, _) in METRICS {
        write!(out, " {name} |").unwrap();
    }
    out.push_str("\n|---|---|---|---|");
    out.push_str(&"---|".repeat(METRICS.len()));
    out.push('\n');
    for run in runs {
        for ((method, split), reports) in group_reports(&run.reports) {
            write!(out, "| {} | {method} | {split} | {} |", run.label, reports.len()).unwrap();
            for (_, f) in METRICS {
                write!(out, " {} |", cell(&metric_values(&reports, f))).unwrap();
            }
            out.push('\n');
        }
    }
    out
}

pub fn run(args: &ReportArgs) -> Result<()> {
    let runs = args
        .runs
        .iter()
        .map(|d| collect_run(d))
        .collect::<Result<Vec<_>>>()?;

    // Rows: metric x split, columns: runs.
    let mut md = String::from("| metric | split |");
    let mut csv = String::from("metric,split");
    for r in &runs {
        write!(md, " {} |", r.label).unwrap();
        write!(csv, ",{}", r.label).unwrap();
    }
    md.push_str("\n|---|---|");
    md.push_str(&"---|".repeat(runs.len()));
    md.push('\n');
    csv.push('\n');
    for split in ["in", "out"] {
        for (name, f) in METRICS {
            let cols: Vec<Vec<f64>> = runs
                .iter()
                .map(|r| {
                    let reports: Vec<&EvalReport> =
                        r.reports.iter().flatten().filter(|e| e.split == split).collect();
                    metric_values(&reports, f)
                })
                .collect();
            if cols.iter().all(Vec::is_empty) {
                continue;
            }
            write!(md, "| {name} | {split} |").unwrap();
            write!(csv, "{name},{split}").unwrap();
            for c in &cols {
                write!(md, " {} |", cell(c)).unwrap();
                if c.is_empty() {
                    csv.push(',');
                } else {
                    write!(csv, ",{}", mean_sd(c).0).unwrap();
                }
            }
            md.push('\n');
            csv.push('\n');
        }
    }

    // One column per run and seed; early-stopped runs leave trailing cells empty.
    let mut series: Vec<(String, &TrainTrace)> = Vec::new();
    for r in &runs {
        for (seed, trace) in r.seeds.iter().zip(&r.traces) {
            let name = if r.seeds.len() > 1 {
                format!("{}/seed-{seed}", r.label)
            } else {
                r.label.clone()
            };
            series.push((name, trace));
        }
    }
    let mut kl = String::from("epoch");
    for (name, _) in &series {
        write!(kl, ",{name}").unwrap();
    }
    kl.push('\n');
    let longest = series.iter().map(|(_, t)| t.len()).max().unwrap_or(0);
    for e in 0..longest {
        write!(kl, "{}", e + 1).unwrap();
        for (_, t) in &series {
            match t.records.get(e) {
                Some(rec) => write!(kl, ",{}", rec.group_kl).unwrap(),
                None => kl.push(','),
            }
        }
        kl.push('\n');
    }

    write_text(&args.out.join("comparison.md"), &md)?;
    write_text(&args.out.join("comparison.csv"), &csv)?;
    write_text(&args.out.join("kl_trace.csv"), &kl)?;
    let mut manifest = RunManifest::new(Command::Report(args.clone()));
    for r in &runs {
        manifest.add_input(&r.dir.join(MANIFEST_FILE))?;
    }
    manifest.outputs = ["comparison.md", "comparison.csv", "kl_trace.csv"]
        .iter()
        .map(|f| args.out.join(f))
        .collect();
    manifest.save(&args.out)?;
    print!("{md}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_sd_examples() {
        assert_eq!(mean_sd(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_sd(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(cell(&[1.0, 3.0]), "2.0000 ± 1.4142");
    }
}
