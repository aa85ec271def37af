//! The four harness verbs: pretrain, train, sweep, report.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};

use atsc::config::{self, PretrainConfig, RunConfig, SweepSpec};
use atsc::metrics::MetricRow;
use atsc::trainer::{self, RunSummary, TrainOptions};

use crate::plot::{sweep_plot, SeriesPoint};

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_ECHO_FILE: &str = "config.json";
pub const SWEEP_TABLE_FILE: &str = "sweep.csv";
pub const SWEEP_PLOT_FILE: &str = "sweep.svg";

fn resolve_out(cli_out: &Option<PathBuf>, cfg_out: &Option<PathBuf>) -> anyhow::Result<PathBuf> {
    cli_out
        .clone()
        .or_else(|| cfg_out.clone())
        .ok_or_else(|| anyhow::anyhow!("no output directory: pass --out or set out_dir in the config"))
}

fn write_metrics(path: &Path, rows: &[MetricRow]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("cannot create {}", path.display()))?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> anyhow::Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path)
        .with_context(|| format!("cannot read {}", path.display()))?;
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        rows.push(rec?);
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// pretrain
// ---------------------------------------------------------------------------

pub fn cmd_pretrain(
    config_path: &Path,
    seed: Option<u64>,
    out: Option<PathBuf>,
    deterministic: bool,
) -> anyhow::Result<()> {
    let mut cfg: PretrainConfig = config::load_json(config_path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let out_dir = resolve_out(&out, &cfg.out_dir)?;
    fs::create_dir_all(&out_dir)?;
    let record = trainer::pretrain_teacher(
        &cfg,
        &TrainOptions {
            deterministic,
            out_dir: Some(out_dir.clone()),
        },
    )?;
    write_metrics(&out_dir.join(METRICS_FILE), &record.metrics)?;
    println!(
        "pretrained teacher: test top-1 {:.2}% -> {}",
        record.test_top1,
        out_dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

/// Runs one training configuration and writes metrics.csv, summary.json, the
/// echoed config, and the final checkpoint into `out_dir`.
fn run_one(cfg: &RunConfig, out_dir: &Path, deterministic: bool) -> anyhow::Result<RunSummary> {
    fs::create_dir_all(out_dir)?;
    let record = trainer::train(
        cfg,
        &TrainOptions {
            deterministic,
            out_dir: Some(out_dir.to_path_buf()),
        },
    )?;
    write_metrics(&out_dir.join(METRICS_FILE), &record.metrics)?;
    let mut echoed = cfg.clone();
    echoed.out_dir = None;
    fs::write(
        out_dir.join(CONFIG_ECHO_FILE),
        serde_json::to_string_pretty(&echoed)?,
    )?;
    fs::write(
        out_dir.join(SUMMARY_FILE),
        serde_json::to_string_pretty(&record.summary)?,
    )?;
    Ok(record.summary)
}

pub fn cmd_train(
    config_path: &Path,
    seed: Option<u64>,
    out: Option<PathBuf>,
    deterministic: bool,
) -> anyhow::Result<()> {
    let mut cfg: RunConfig = config::load_json(config_path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    if cfg.alpha.is_some() && !cfg.mode.uses_alpha() {
        eprintln!(
            "warning: mode {} does not use the balancing parameter; alpha = {} is ignored",
            cfg.mode,
            cfg.alpha.unwrap()
        );
    }
    let out_dir = resolve_out(&out, &cfg.out_dir)?;
    let summary = run_one(&cfg, &out_dir, deterministic)?;
    if summary.diverged {
        bail!(
            "training diverged ({}); metrics up to the last completed epoch and the last-good checkpoint were kept in {}",
            summary.divergence.as_deref().unwrap_or("unknown"),
            out_dir.display()
        );
    }
    println!(
        "mode {} seed {}: student test top-1 {:.2}% (teacher drift {}) -> {}",
        summary.mode,
        summary.seed,
        summary.final_student_top1_test.unwrap_or(f64::NAN),
        summary
            .final_teacher_drift_rms
            .map(|d| format!("{d:.6}"))
            .unwrap_or_else(|| "n/a".to_string()),
        out_dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct SweepRow {
    parameter: String,
    value: f64,
    seeds: usize,
    diverged: usize,
    mean_top1: Option<f64>,
    std_top1: Option<f64>,
    mean_final_drift: Option<f64>,
    status: String,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn cmd_sweep(
    config_path: &Path,
    seed: Option<u64>,
    out: Option<PathBuf>,
    deterministic: bool,
) -> anyhow::Result<()> {
    let mut spec: SweepSpec = config::load_json(config_path)?;
    if let Some(s) = seed {
        spec.base.seed = s;
    }
    spec.validate()?;
    let out_dir = resolve_out(&out, &spec.base.out_dir)?;
    fs::create_dir_all(&out_dir)?;

    let mut rows = Vec::new();
    let mut points = Vec::new();
    for &value in &spec.values {
        let mut top1s = Vec::new();
        let mut drifts = Vec::new();
        let mut diverged = 0usize;
        for k in 0..spec.seeds_per_cell {
            let cell_seed = spec.base.seed + k as u64;
            let cfg = spec.cell_config(value, cell_seed);
            let cell_dir = out_dir
                .join("cells")
                .join(format!("{}={}", spec.parameter, value))
                .join(format!("seed={cell_seed}"));
            let summary = run_one(&cfg, &cell_dir, deterministic)?;
            if summary.diverged {
                diverged += 1;
                eprintln!(
                    "cell {}={} seed {} diverged: {}",
                    spec.parameter,
                    value,
                    cell_seed,
                    summary.divergence.as_deref().unwrap_or("unknown")
                );
            } else {
                top1s.push(summary.final_student_top1_test.unwrap_or(f64::NAN));
                if let Some(d) = summary.final_teacher_drift_rms {
                    drifts.push(d);
                }
            }
        }
        let (mean_top1, std_top1) = if top1s.is_empty() {
            (None, None)
        } else {
            let (m, s) = mean_std(&top1s);
            (Some(m), Some(s))
        };
        let mean_final_drift = if drifts.is_empty() {
            None
        } else {
            Some(drifts.iter().sum::<f64>() / drifts.len() as f64)
        };
        let status = if diverged == 0 {
            "ok".to_string()
        } else {
            format!("diverged({diverged}/{})", spec.seeds_per_cell)
        };
        points.push(SeriesPoint {
            label: format!("{value}"),
            mean: mean_top1,
            std: std_top1.unwrap_or(0.0),
        });
        rows.push(SweepRow {
            parameter: spec.parameter.to_string(),
            value,
            seeds: spec.seeds_per_cell,
            diverged,
            mean_top1,
            std_top1,
            mean_final_drift,
            status,
        });
    }

    let table_path = out_dir.join(SWEEP_TABLE_FILE);
    let mut w = csv::Writer::from_path(&table_path)?;
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush()?;

    sweep_plot(
        &format!("student top-1 vs {}", spec.parameter),
        &spec.parameter.to_string(),
        "top-1 accuracy (%)",
        &points,
        &out_dir.join(SWEEP_PLOT_FILE),
    )?;

    for row in &rows {
        match (row.mean_top1, row.std_top1) {
            (Some(m), Some(s)) => println!(
                "{}={}: top-1 {m:.2} +/- {s:.2} over {} seeds ({})",
                row.parameter, row.value, row.seeds, row.status
            ),
            _ => println!("{}={}: {}", row.parameter, row.value, row.status),
        }
    }
    println!("sweep results -> {}", out_dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

struct RunEntry {
    summary: RunSummary,
}

/// Scenario identity: the echoed config with run-varying fields removed.
fn scenario_key(cfg_value: &serde_json::Value) -> String {
    let mut v = cfg_value.clone();
    if let Some(obj) = v.as_object_mut() {
        obj.remove("seed");
        obj.remove("out_dir");
    }
    v.to_string()
}

fn scenario_label(cfg_value: &serde_json::Value) -> String {
    let mode = cfg_value["mode"].as_str().unwrap_or("?");
    let alpha = cfg_value
        .get("alpha")
        .and_then(|a| a.as_f64())
        .map(|a| format!("{a}"))
        .unwrap_or_else(|| "-".to_string());
    let r = cfg_value
        .get("reduction_factor")
        .and_then(|a| a.as_u64())
        .map(|a| format!("{a}"))
        .unwrap_or_else(|| "-".to_string());
    let ds = cfg_value["dataset"]["kind"].as_str().unwrap_or("?");
    format!("{mode} a={alpha} r={r} data={ds}")
}

pub fn cmd_report(dirs: &[PathBuf], out: Option<PathBuf>) -> anyhow::Result<()> {
    if dirs.is_empty() {
        bail!("report needs at least one run directory");
    }
    let mut groups: BTreeMap<String, (String, Vec<RunEntry>)> = BTreeMap::new();
    for dir in dirs {
        let summary_path = dir.join(SUMMARY_FILE);
        let config_path = dir.join(CONFIG_ECHO_FILE);
        if !summary_path.exists() || !config_path.exists() {
            bail!(
                "{} does not hold a completed run (missing {} or {})",
                dir.display(),
                SUMMARY_FILE,
                CONFIG_ECHO_FILE
            );
        }
        let summary: RunSummary = serde_json::from_str(&fs::read_to_string(&summary_path)?)
            .with_context(|| format!("cannot parse {}", summary_path.display()))?;
        let cfg_value: serde_json::Value = serde_json::from_str(&fs::read_to_string(&config_path)?)?;

        // Cross-check the metrics file: its final test row must agree with
        // the summary, which also exercises the CSV round trip.
        let rows = read_metrics(&dir.join(METRICS_FILE))?;
        if let (Some(final_test), Some(expect)) = (
            rows.iter().rev().find(|r| r.split == "test"),
            summary.final_student_top1_test,
        ) {
            if !summary.diverged && (final_test.top1 - expect).abs() > 1e-9 {
                eprintln!(
                    "warning: {} metrics.csv final test top-1 {} disagrees with summary {}",
                    dir.display(),
                    final_test.top1,
                    expect
                );
            }
        }

        let key = scenario_key(&cfg_value);
        let label = scenario_label(&cfg_value);
        groups
            .entry(key)
            .or_insert_with(|| (label, Vec::new()))
            .1
            .push(RunEntry { summary });
    }

    if groups.len() > 1 {
        eprintln!(
            "warning: {} distinct scenarios mixed in one report; grouping separately",
            groups.len()
        );
    }

    #[derive(serde::Serialize)]
    struct ReportRow {
        scenario: String,
        runs: usize,
        diverged: usize,
        mean_top1: Option<f64>,
        std_top1: Option<f64>,
        mean_teacher_drift: Option<f64>,
        teacher_params: usize,
        student_params: usize,
        projector_params: usize,
        increase_percent: f64,
    }

    let mut report_rows = Vec::new();
    for (_, (label, entries)) in &groups {
        let ok: Vec<&RunEntry> = entries.iter().filter(|e| !e.summary.diverged).collect();
        let diverged = entries.len() - ok.len();
        let top1s: Vec<f64> = ok
            .iter()
            .filter_map(|e| e.summary.final_student_top1_test)
            .collect();
        let (mean_top1, std_top1) = if top1s.is_empty() {
            (None, None)
        } else {
            let (m, s) = mean_std(&top1s);
            (Some(m), Some(s))
        };
        let drifts: Vec<f64> = ok
            .iter()
            .filter_map(|e| e.summary.final_teacher_drift_rms)
            .collect();
        let mean_drift = if drifts.is_empty() {
            None
        } else {
            Some(drifts.iter().sum::<f64>() / drifts.len() as f64)
        };
        let counts = entries[0].summary.param_counts;
        report_rows.push(ReportRow {
            scenario: label.clone(),
            runs: entries.len(),
            diverged,
            mean_top1,
            std_top1,
            mean_teacher_drift: mean_drift,
            teacher_params: counts.teacher,
            student_params: counts.student,
            projector_params: counts.projector,
            increase_percent: counts.increase_percent,
        });
    }

    println!(
        "{:<42} {:>5} {:>9} {:>16} {:>12} {:>11}",
        "scenario", "runs", "diverged", "top-1 (%)", "drift", "increase%"
    );
    for r in &report_rows {
        let top1 = match (r.mean_top1, r.std_top1) {
            (Some(m), Some(s)) => format!("{m:.2} +/- {s:.2}"),
            _ => "diverged".to_string(),
        };
        let drift = r
            .mean_teacher_drift
            .map(|d| format!("{d:.6}"))
            .unwrap_or_else(|| "-".to_string());
        println!(
            "{:<42} {:>5} {:>9} {:>16} {:>12} {:>11.2}",
            r.scenario, r.runs, r.diverged, top1, drift, r.increase_percent
        );
    }

    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        for r in &report_rows {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    match out {
        Some(dir) => {
            fs::create_dir_all(&dir)?;
            let path = dir.join("report.csv");
            fs::write(&path, &buf)?;
            println!("report table -> {}", path.display());
        }
        None => print!("{}", String::from_utf8(buf)?),
    }
    Ok(())
}
