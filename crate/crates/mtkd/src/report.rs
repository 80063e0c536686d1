//! Run records and the CSV / markdown reports built from them.

use std::collections::BTreeMap;
use std::path::Path;

use mtkd_core::tasks::{LossMeans, MetricsReport};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Metrics of one epoch. Loss means are those of the epoch's training steps.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub dev: MetricsReport,
    pub test: MetricsReport,
    pub losses: LossMeans,
    /// Seconds since the run started, at the end of this epoch.
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub run_id: String,
    pub variant: String,
    pub seed: u64,
    pub epochs: Vec<EpochMetrics>,
    pub wall_clock_s: f64,
    pub config_hash: u64,
    pub dataset_hash: u64,
    /// Phase that produced a non-finite loss.
    pub failed: Option<String>,
}

impl RunRecord {
    /// First epoch with the highest dev accuracy.
    pub fn best(&self) -> Option<&EpochMetrics> {
        best_of(&self.epochs, |e| e.dev.accuracy)
    }
}

fn best_of<T>(items: &[T], key: impl Fn(&T) -> f64) -> Option<&T> {
    let mut best: Option<&T> = None;
    for item in items {
        if best.map_or(true, |b| key(item) > key(b)) {
            best = Some(item);
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub run_id: String,
    pub variant: String,
    pub seed: u64,
    pub epoch: usize,
    pub split: String,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub loss_task: Option<f64>,
    pub loss_hid: Option<f64>,
    pub loss_dis: Option<f64>,
    pub wall_clock_s: Option<f64>,
}

/// One row per epoch and split, dev before test.
pub fn rows(records: &[RunRecord], wall_clock: bool) -> Vec<CsvRow> {
    let mut out = Vec::new();
    for r in records {
        for e in &r.epochs {
            for (split, m) in [("dev", &e.dev), ("test", &e.test)] {
                out.push(CsvRow {
                    run_id: r.run_id.clone(),
                    variant: r.variant.clone(),
                    seed: r.seed,
                    epoch: e.epoch,
                    split: split.to_string(),
                    accuracy: m.accuracy,
                    macro_f1: m.macro_f1,
                    loss_task: e.losses.task,
                    loss_hid: e.losses.hidden,
                    loss_dis: e.losses.distill,
                    wall_clock_s: wall_clock.then_some(e.wall_clock_s),
                });
            }
        }
    }
    out
}

pub fn csv_string(rows: &[CsvRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)?;
    }
    if rows.is_empty() {
        w.write_record(["run_id", "variant", "seed", "epoch", "split", "accuracy", "macro_f1", "loss_task", "loss_hid", "loss_dis", "wall_clock_s"])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn read_csv(path: &Path) -> Result<Vec<CsvRow>> {
    let text = std::fs::read(path).map_err(Error::io(path))?;
    let mut r = csv::Reader::from_reader(text.as_slice());
    Ok(r.deserialize().collect::<Result<Vec<CsvRow>, _>>()?)
}

/// Test metrics of one run at its best dev epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct Selected {
    pub run_id: String,
    pub variant: String,
    pub seed: u64,
    pub epoch: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
}

/// Picks, for each run, the first epoch with the best dev accuracy and
/// returns its test row. Runs keep their first-appearance order.
pub fn select(rows: &[CsvRow]) -> Vec<Selected> {
    let mut order: Vec<&str> = Vec::new();
    let mut by_run: BTreeMap<&str, Vec<&CsvRow>> = BTreeMap::new();
    for row in rows {
        let entry = by_run.entry(&row.run_id).or_default();
        if entry.is_empty() {
            order.push(&row.run_id);
        }
        entry.push(row);
    }
    order
        .into_iter()
        .filter_map(|id| {
            let runs = &by_run[id];
            let dev: Vec<&&CsvRow> = runs.iter().filter(|r| r.split == "dev").collect();
            let best = best_of(&dev, |r| r.accuracy)?;
            let test = runs.iter().find(|r| r.split == "test" && r.epoch == best.epoch)?;
            Some(Selected {
                run_id: id.to_string(),
                variant: test.variant.clone(),
                seed: test.seed,
                epoch: best.epoch,
                accuracy: test.accuracy,
                macro_f1: test.macro_f1,
            })
        })
        .collect()
}

/// Arithmetic mean and sample standard deviation (n − 1; 0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub variant: String,
    pub runs: usize,
    pub accuracy: (f64, f64),
    pub macro_f1: (f64, f64),
}

/// Per-variant mean and std of the selected test metrics, in variant order.
pub fn summarize(selected: &[Selected]) -> Vec<Summary> {
    let mut order: Vec<&str> = Vec::new();
    for s in selected {
        if !order.contains(&s.variant.as_str()) {
            order.push(&s.variant);
        }
    }
    order
        .into_iter()
        .map(|v| {
            let picked: Vec<&Selected> = selected.iter().filter(|s| s.variant == v).collect();
            let acc: Vec<f64> = picked.iter().map(|s| s.accuracy).collect();
            let f1: Vec<f64> = picked.iter().map(|s| s.macro_f1).collect();
            Summary {
                variant: v.to_string(),
                runs: picked.len(),
                accuracy: mean_std(&acc),
                macro_f1: mean_std(&f1),
            }
        })
        .collect()
}

/// Markdown table of test accuracy and macro-F1 (in percent), mean ± std.
pub fn markdown(summaries: &[Summary], failed: &[String]) -> String {
    let mut out = String::from("| variant | runs | accuracy | macro-F1 |\n|---|---|---|---|\n");
    for s in summaries {
        out.push_str(&format!(
            "| {} | {} | {:.2} ± {:.2} | {:.2} ± {:.2} |\n",
            s.variant,
            s.runs,
            100.0 * s.accuracy.0,
            100.0 * s.accuracy.1,
            100.0 * s.macro_f1.0,
            100.0 * s.macro_f1.1
        ));
    }
    if !failed.is_empty() {
        out.push_str("\nFailed runs:\n\n");
        for f in failed {
            out.push_str(&format!("- {f}\n"));
        }
    }
    out
}

/// Writes `<stem>.csv` and `<stem>.md` under `dir` and returns the summaries.
pub fn emit(dir: &Path, stem: &str, records: &[RunRecord], wall_clock: bool) -> Result<Vec<Summary>> {
    std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let rows = rows(records, wall_clock);
    let csv_path = dir.join(format!("{stem}.csv"));
    std::fs::write(&csv_path, csv_string(&rows)?).map_err(Error::io(&csv_path))?;
    let summaries = summarize(&select(&rows));
    let failed: Vec<String> = records
        .iter()
        .filter_map(|r| r.failed.as_ref().map(|p| format!("{} diverged during {p}", r.run_id)))
        .collect();
    let md_path = dir.join(format!("{stem}.md"));
    std::fs::write(&md_path, markdown(&summaries, &failed)).map_err(Error::io(&md_path))?;
    Ok(summaries)
}
