//! CSV, JSON and text outputs.

use std::fs;
use std::path::Path;

use deer_core::mining::MiningReport;
use deer_core::training::TrainingLog;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::format(path, e.to_string())
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| csv_error(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRow {
    pub step: u64,
    pub loss: f64,
    pub heldout_r_at_1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub final_r1: f64,
    pub wall_seconds: f64,
    pub stopped_early: bool,
}

/// `train_log.csv` and `train_summary.json`.
pub fn write_training_log(dir: &Path, log: &TrainingLog, wall_seconds: f64) -> Result<()> {
    let rows: Vec<TrainRow> = log
        .rows
        .iter()
        .map(|r| TrainRow {
            step: r.step,
            loss: r.loss,
            heldout_r_at_1: r.heldout_r1,
        })
        .collect();
    write_csv(&dir.join("train_log.csv"), &rows)?;
    write_json(
        &dir.join("train_summary.json"),
        &TrainSummary {
            steps: log.steps,
            final_r1: log.final_r1,
            wall_seconds,
            stopped_early: log.stopped_early,
        },
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningRow {
    pub round: usize,
    pub new_negatives: usize,
    pub pool_size: usize,
    pub heldout_r1: f64,
    pub auc: f64,
}

/// `mining.csv` and the recall curve as `mining_curve.json`.
pub fn write_mining_report(dir: &Path, report: &MiningReport) -> Result<()> {
    let rows: Vec<MiningRow> = report
        .rounds
        .iter()
        .map(|r| MiningRow {
            round: r.round,
            new_negatives: r.new_negatives,
            pool_size: r.pool_size,
            heldout_r1: r.heldout_r1,
            auc: r.auc,
        })
        .collect();
    write_csv(&dir.join("mining.csv"), &rows)?;
    let curve: Vec<serde_json::Value> = report
        .rounds
        .iter()
        .map(|r| {
            serde_json::json!({
                "round": r.round,
                "heldout_r1": r.heldout_r1,
                "auc": if r.auc.is_finite() { serde_json::json!(r.auc) } else { serde_json::Value::Null },
            })
        })
        .collect();
    write_json(&dir.join("mining_curve.json"), &curve)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: String,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p99_ms: f64,
    pub recall_overlap: f64,
}

pub fn write_benchmark(path: &Path, rows: &[BenchRow]) -> Result<()> {
    write_csv(path, rows)
}

pub fn read_benchmark(path: &Path) -> Result<Vec<BenchRow>> {
    read_csv(path)
}

/// One system in the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    pub r_at_1: f64,
    pub r_at_100: f64,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p99_ms: f64,
    pub queries: usize,
}

/// Rendered comparison in the three output formats, rows sorted by name.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub rows: Vec<ReportRow>,
    pub text: String,
    pub csv: String,
    pub json: String,
}

pub fn comparison_report(rows: &[ReportRow]) -> Result<Comparison> {
    if rows.is_empty() {
        return Err(Error::Data("comparison report needs at least one row".into()));
    }
    let mut rows = rows.to_vec();
    rows.sort_by(|a, b| a.name.cmp(&b.name));

    let name_w = rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(6);
    let mut text = format!(
        "{:<name_w$}  {:>7}  {:>7}  {:>9}  {:>9}  {:>9}  {:>7}\n",
        "system", "R@1", "R@100", "mean ms", "p50 ms", "p99 ms", "queries"
    );
    for r in &rows {
        text.push_str(&format!(
            "{:<name_w$}  {:>7.4}  {:>7.4}  {:>9.4}  {:>9.4}  {:>9.4}  {:>7}\n",
            r.name, r.r_at_1, r.r_at_100, r.mean_ms, r.p50_ms, r.p99_ms, r.queries
        ));
    }

    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r).map_err(|e| Error::Data(e.to_string()))?;
    }
    let csv = String::from_utf8(w.into_inner().map_err(|e| Error::Data(e.to_string()))?)
        .expect("csv output is UTF-8");
    let json = serde_json::to_string_pretty(&rows).expect("plain rows") + "\n";
    Ok(Comparison { rows, text, csv, json })
}

/// `report.txt`, `report.csv` and `report.json` in `dir`.
pub fn write_comparison(dir: &Path, c: &Comparison) -> Result<()> {
    for (name, body) in [("report.txt", &c.text), ("report.csv", &c.csv), ("report.json", &c.json)] {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn write_json_file<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    write_json(path, value)
}
