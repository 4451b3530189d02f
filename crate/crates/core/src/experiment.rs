//! Run orchestration: ingest, warm-up, prequential evaluation and the
//! artifacts written to an output directory.
//!
//! A run directory holds
//!
//! - `config.txt`: the canonical configuration,
//! - `metrics.csv`: one row per prequential iteration,
//! - `summary.json`: configuration echo plus aggregate metrics,
//! - `MANIFEST`: status, and on failure the stage it failed in.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, RunSpec};
use crate::error::{Error, Result};
use crate::harness::{aggregate, MetricsRecord, Summary, System};
use crate::ingest::{chronological_split, load_dataset, Dataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Ingest,
    Training,
    Prequential,
    Report,
}

impl Stage {
    fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Training => "training",
            Stage::Prequential => "prequential",
            Stage::Report => "report",
        }
    }
}

/// Warm-up on the training split, then test-then-train on the rest,
/// entirely in memory.
pub fn evaluate(cfg: &ExperimentConfig, ds: &Dataset) -> Result<(Vec<MetricsRecord>, Summary)> {
    let mut records = Vec::new();
    evaluate_with(cfg, ds, |r| {
        records.push(r.clone());
        Ok(())
    })
    .map_err(|(_, e)| e)?;
    let summary = aggregate(&records)?;
    Ok((records, summary))
}

fn evaluate_with<F>(cfg: &ExperimentConfig, ds: &Dataset, sink: F) -> std::result::Result<(), (Stage, Error)>
where
    F: FnMut(&MetricsRecord) -> Result<()>,
{
    let (train, test) = chronological_split(ds, cfg.train_fraction).map_err(|e| (Stage::Ingest, e))?;
    if test.is_empty() {
        return Err((Stage::Ingest, Error::Empty("test split".to_string())));
    }
    let mut system = System::<f64>::new(cfg, ds.num_users, ds.num_items).map_err(|e| (Stage::Training, e))?;
    system.run_training_phase(train).map_err(|e| (Stage::Training, e))?;
    system
        .run_prequential_phase_with(test, sink)
        .map_err(|e| (Stage::Prequential, e))
}

/// Serialized form of a run's `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub num_users: usize,
    pub num_items: usize,
    pub num_interactions: usize,
    pub iterations: usize,
    pub n_test: usize,
    pub hr: f64,
    pub ndcg: f64,
    pub hr_models: Vec<f64>,
    pub ndcg_models: Vec<f64>,
    pub top_k: usize,
}

/// Median of per-seed runs, written for repeated experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatSummary {
    pub label: String,
    pub seeds: Vec<u64>,
    pub hr: f64,
    pub ndcg: f64,
    pub per_seed: Vec<RunSummary>,
}

fn csv_header(num_models: usize, k: usize) -> String {
    let mut cols = vec![
        "iteration".to_string(),
        "n_seen".to_string(),
        format!("hr{k}_fused"),
        format!("ndcg{k}_fused"),
    ];
    cols.extend((0..num_models).map(|i| format!("hr{k}_model_{i}")));
    cols.push("wall_ms_test".to_string());
    cols.push("wall_ms_train".to_string());
    cols.join(",")
}

fn csv_row(r: &MetricsRecord) -> String {
    let mut cols = vec![
        r.iteration.to_string(),
        r.n_seen.to_string(),
        format!("{:.6}", r.fused.hr()),
        format!("{:.6}", r.fused.ndcg()),
    ];
    cols.extend(r.models.iter().map(|m| format!("{:.6}", m.hr())));
    cols.push(format!("{:.3}", r.wall_ms_test));
    cols.push(format!("{:.3}", r.wall_ms_train));
    cols.join(",")
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_manifest(dir: &Path, outcome: std::result::Result<usize, (Stage, &Error, usize)>) -> Result<()> {
    let text = match outcome {
        Ok(n) => format!("status = ok\niterations_completed = {n}\n"),
        Err((stage, e, n)) => format!(
            "status = failed\nstage = {}\niterations_completed = {n}\nerror = {e}\n",
            stage.name()
        ),
    };
    write_text(&dir.join("MANIFEST"), &text)
}

fn load_spec_dataset(spec: &RunSpec, seed: u64) -> Result<Dataset> {
    let path = spec
        .dataset
        .as_ref()
        .ok_or_else(|| Error::invalid("dataset", "no dataset path given"))?;
    load_dataset(path, &spec.delimiter, spec.subsample_users.map(|k| (k, seed)))
}

/// Runs `spec` once on an already loaded dataset and writes the run
/// directory. Artifacts written before a failure are kept.
pub fn run_single(spec: &RunSpec, ds: &Dataset, dir: &Path) -> Result<RunSummary> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cfg = &spec.config;
    let mut one = spec.clone();
    one.out_dir = dir.to_path_buf();
    one.repeats = 1;
    write_text(&dir.join("config.txt"), &one.to_config_string())?;

    let csv_path = dir.join("metrics.csv");
    let file = fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    let mut csv = BufWriter::new(file);
    writeln!(csv, "{}", csv_header(cfg.num_models, cfg.top_k)).map_err(|e| Error::io(&csv_path, e))?;

    let mut records = Vec::new();
    let result = evaluate_with(cfg, ds, |r| {
        writeln!(csv, "{}", csv_row(r)).map_err(|e| Error::io(&csv_path, e))?;
        csv.flush().map_err(|e| Error::io(&csv_path, e))?;
        records.push(r.clone());
        Ok(())
    });
    drop(csv);
    if let Err((stage, e)) = result {
        write_manifest(dir, Err((stage, &e, records.len())))?;
        return Err(e);
    }
    let summary = match aggregate(&records) {
        Ok(s) => s,
        Err(e) => {
            write_manifest(dir, Err((Stage::Report, &e, records.len())))?;
            return Err(e);
        }
    };
    let run = RunSummary {
        label: spec.label.clone(),
        seed: cfg.rng_seed,
        config: cfg.clone(),
        num_users: ds.num_users,
        num_items: ds.num_items,
        num_interactions: ds.len(),
        iterations: summary.iterations,
        n_test: summary.n_test,
        hr: summary.hr,
        ndcg: summary.ndcg,
        hr_models: summary.hr_models,
        ndcg_models: summary.ndcg_models,
        top_k: cfg.top_k,
    };
    write_text(&dir.join("summary.json"), &serde_json::to_string_pretty(&run)?)?;
    write_manifest(dir, Ok(records.len()))?;
    Ok(run)
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Loads the dataset and runs every repeat (seeds `seed`, `seed + 1`, ...).
/// A single repeat writes straight into `out_dir`; more write one
/// `seed-<s>` directory each plus a median `summary.json`.
pub fn run_experiment(spec: &RunSpec) -> Result<Vec<RunSummary>> {
    spec.validate()?;
    fs::create_dir_all(&spec.out_dir).map_err(|e| Error::io(&spec.out_dir, e))?;
    let base = spec.config.rng_seed;
    let mut runs = Vec::with_capacity(spec.repeats);
    for i in 0..spec.repeats {
        let mut one = spec.clone();
        one.config.rng_seed = base + i as u64;
        let dir = if spec.repeats == 1 {
            spec.out_dir.clone()
        } else {
            spec.out_dir.join(format!("seed-{}", one.config.rng_seed))
        };
        let ds = match load_spec_dataset(&one, one.config.rng_seed) {
            Ok(ds) => ds,
            Err(e) => {
                fs::create_dir_all(&dir).map_err(|err| Error::io(&dir, err))?;
                write_manifest(&dir, Err((Stage::Ingest, &e, 0)))?;
                return Err(e);
            }
        };
        log::info!(
            "run `{}` seed {}: {} users, {} items, {} interactions",
            spec.label,
            one.config.rng_seed,
            ds.num_users,
            ds.num_items,
            ds.len()
        );
        runs.push(run_single(&one, &ds, &dir)?);
    }
    if spec.repeats > 1 {
        let first = &runs[0];
        let med = RunSummary {
            seed: base,
            num_users: first.num_users,
            num_items: first.num_items,
            num_interactions: first.num_interactions,
            hr: median(runs.iter().map(|r| r.hr).collect()),
            ndcg: median(runs.iter().map(|r| r.ndcg).collect()),
            hr_models: (0..first.hr_models.len())
                .map(|k| median(runs.iter().map(|r| r.hr_models[k]).collect()))
                .collect(),
            ndcg_models: (0..first.ndcg_models.len())
                .map(|k| median(runs.iter().map(|r| r.ndcg_models[k]).collect()))
                .collect(),
            ..first.clone()
        };
        let repeat = RepeatSummary {
            label: spec.label.clone(),
            seeds: runs.iter().map(|r| r.seed).collect(),
            hr: med.hr,
            ndcg: med.ndcg,
            per_seed: runs.clone(),
        };
        write_text(&spec.out_dir.join("summary.json"), &serde_json::to_string_pretty(&med)?)?;
        write_text(&spec.out_dir.join("repeats.json"), &serde_json::to_string_pretty(&repeat)?)?;
        write_manifest(&spec.out_dir, Ok(runs.iter().map(|r| r.iterations).sum()))?;
    }
    Ok(runs)
}

/// Parses `key=v1,v2,...` sweep axes.
pub fn parse_axis(text: &str) -> Result<(String, Vec<String>)> {
    let (k, vs) = text
        .split_once('=')
        .ok_or_else(|| Error::invalid(text, "sweep axis must have the form key=v1,v2,..."))?;
    let values: Vec<String> = vs
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(str::to_string)
        .collect();
    if values.is_empty() {
        return Err(Error::invalid(k.trim(), "sweep axis has no values"));
    }
    Ok((k.trim().to_string(), values))
}

/// Runs the cartesian product of `axes` on top of `spec`; each point gets
/// its own directory under `spec.out_dir` and a label naming its values.
pub fn sweep(spec: &RunSpec, axes: &[(String, Vec<String>)]) -> Result<Vec<PathBuf>> {
    let mut points: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for (k, values) in axes {
        points = points
            .into_iter()
            .flat_map(|p| {
                values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push((k.clone(), v.clone()));
                    q
                })
            })
            .collect();
    }
    let mut dirs = Vec::with_capacity(points.len());
    for point in points {
        let mut one = spec.clone();
        for (k, v) in &point {
            one.set(k, v, 0)?;
        }
        let label = if point.is_empty() {
            spec.label.clone()
        } else {
            point
                .iter()
                .map(|(k, v)| format!("{k}={v}"))
                .collect::<Vec<_>>()
                .join(",")
        };
        let dir_name: String = label
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
            .collect();
        one.label = label;
        one.out_dir = spec.out_dir.join(dir_name);
        one.validate()?;
        run_experiment(&one)?;
        dirs.push(one.out_dir);
    }
    Ok(dirs)
}

/// One row of a comparison report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub label: String,
    pub hr: f64,
    pub ndcg: f64,
    /// Relative gain of the first run over this one, in percent.
    pub hr_gain: Option<f64>,
    pub ndcg_gain: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub top_k: usize,
    pub rows: Vec<ReportRow>,
}

/// Relative improvement of `a` over `b` in percent.
pub fn improvement(a: f64, b: f64) -> f64 {
    (a - b) / b * 100.0
}

fn format_gain(g: Option<f64>) -> String {
    match g {
        Some(g) if g.is_finite() => format!("{g:+.1}%"),
        Some(_) => "n/a".to_string(),
        None => "-".to_string(),
    }
}

impl Report {
    fn has_gains(&self) -> bool {
        self.rows.len() > 1
    }

    fn cells(&self) -> (Vec<String>, Vec<Vec<String>>) {
        let k = self.top_k;
        let mut header = vec!["label".to_string(), format!("HR@{k}"), format!("NDCG@{k}")];
        if self.has_gains() {
            header.push("HR gain".to_string());
            header.push("NDCG gain".to_string());
        }
        let rows = self
            .rows
            .iter()
            .map(|r| {
                let mut row = vec![r.label.clone(), format!("{:.4}", r.hr), format!("{:.4}", r.ndcg)];
                if self.has_gains() {
                    row.push(format_gain(r.hr_gain));
                    row.push(format_gain(r.ndcg_gain));
                }
                row
            })
            .collect();
        (header, rows)
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let (header, rows) = self.cells();
        let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
        for row in &rows {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.chars().count());
            }
        }
        let line = |cells: &[String]| -> String {
            cells
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, &w))| {
                    if i == 0 {
                        format!("{c:<w$}")
                    } else {
                        format!("{c:>w$}")
                    }
                })
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        };
        let mut out = line(&header);
        out.push('\n');
        out.push_str(&widths.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().join("  "));
        out.push('\n');
        for row in &rows {
            out.push_str(&line(row));
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let (header, rows) = self.cells();
        let quote = |c: &String| {
            if c.contains(',') || c.contains('"') {
                format!("\"{}\"", c.replace('"', "\"\""))
            } else {
                c.clone()
            }
        };
        let mut out = header.iter().map(quote).collect::<Vec<_>>().join(",");
        out.push('\n');
        for row in &rows {
            out.push_str(&row.iter().map(quote).collect::<Vec<_>>().join(","));
            out.push('\n');
        }
        out
    }
}

/// Builds a comparison from run directories; the first is the reference
/// whose gain over every other run is reported.
pub fn report(dirs: &[PathBuf]) -> Result<Report> {
    if dirs.is_empty() {
        return Err(Error::Empty("no run directories".to_string()));
    }
    let mut runs = Vec::with_capacity(dirs.len());
    for dir in dirs {
        let path = dir.join("summary.json");
        if !path.is_file() {
            return Err(Error::invalid(
                "report",
                format!("missing summary file in {}", dir.display()),
            ));
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let run: RunSummary = serde_json::from_str(&text)?;
        runs.push(run);
    }
    let (hr0, ndcg0) = (runs[0].hr, runs[0].ndcg);
    let rows = runs
        .iter()
        .enumerate()
        .map(|(i, r)| ReportRow {
            label: r.label.clone(),
            hr: r.hr,
            ndcg: r.ndcg,
            hr_gain: (i > 0).then(|| improvement(hr0, r.hr)),
            ndcg_gain: (i > 0).then(|| improvement(ndcg0, r.ndcg)),
        })
        .collect();
    Ok(Report {
        top_k: runs[0].top_k,
        rows,
    })
}
