//! Report files for sweeps.
//!
//! Layout: `<out>/<experiment>/<timestamp>/` holding
//!
//! - `rows.csv`: one row per (setting, seed)
//! - `summary.csv`: mean and sample std per setting
//! - `curves.csv`: long format `series,step,value`
//! - `report.json`: everything above plus the full run reports and the
//!   config that produced them

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::sweep::{summarize, CurvePoint, SummaryRow, SweepRow, SweepTable};
use super::train::RunReport;
use crate::error::{Error, Result};

pub const ROWS_FILE: &str = "rows.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const CURVES_FILE: &str = "curves.csv";
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportFiles {
    pub dir: PathBuf,
    pub rows: PathBuf,
    pub summary: PathBuf,
    pub curves: PathBuf,
    pub report: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub experiment: String,
    pub created_at: String,
    pub config: serde_json::Value,
    pub rows: Vec<SweepRow>,
    pub summary: Vec<SummaryRow>,
    pub runs: Vec<RunReport>,
}

fn write_csv<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for item in items {
        w.serialize(item)?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn write_rows_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    write_csv(path, rows)
}

pub fn read_rows_csv(path: &Path) -> Result<Vec<SweepRow>> {
    read_csv(path)
}

pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    write_csv(path, rows)
}

pub fn read_summary_csv(path: &Path) -> Result<Vec<SummaryRow>> {
    read_csv(path)
}

pub fn write_curves_csv(path: &Path, curves: &[CurvePoint]) -> Result<()> {
    write_csv(path, curves)
}

pub fn read_curves_csv(path: &Path) -> Result<Vec<CurvePoint>> {
    read_csv(path)
}

/// A fresh `<out>/<experiment>/<timestamp>` directory.
pub fn run_dir(out: &Path, experiment: &str) -> Result<(PathBuf, String)> {
    let now = chrono::Utc::now();
    let stamp = now.format("%Y%m%dT%H%M%S%3fZ").to_string();
    let base = out.join(experiment);
    fs::create_dir_all(&base).map_err(|e| Error::io(base.display().to_string(), e))?;
    let mut dir = base.join(&stamp);
    let mut n = 1;
    while dir.exists() {
        dir = base.join(format!("{stamp}-{n}"));
        n += 1;
    }
    fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    Ok((dir, now.to_rfc3339()))
}

/// Writes all report files for `table` into a new run directory.
pub fn write_report(out: &Path, table: &SweepTable, config: serde_json::Value) -> Result<ReportFiles> {
    let (dir, created_at) = run_dir(out, &table.experiment)?;
    write_report_into(&dir, table, config, created_at)
}

pub fn write_report_into(dir: &Path, table: &SweepTable, config: serde_json::Value, created_at: String) -> Result<ReportFiles> {
    let files = ReportFiles {
        dir: dir.to_path_buf(),
        rows: dir.join(ROWS_FILE),
        summary: dir.join(SUMMARY_FILE),
        curves: dir.join(CURVES_FILE),
        report: dir.join(REPORT_FILE),
    };
    write_rows_csv(&files.rows, &table.rows)?;
    write_summary_csv(&files.summary, &table.summary)?;
    write_curves_csv(&files.curves, &table.curves)?;
    let doc = ReportDocument {
        experiment: table.experiment.clone(),
        created_at,
        config,
        rows: table.rows.clone(),
        summary: table.summary.clone(),
        runs: table.runs.clone(),
    };
    let json = serde_json::to_vec_pretty(&doc)?;
    fs::write(&files.report, json).map_err(|e| Error::io(files.report.display().to_string(), e))?;
    Ok(files)
}

pub fn read_report(path: &Path) -> Result<ReportDocument> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Summary recomputed from one or more `rows.csv` files.
pub fn summarize_files(paths: &[PathBuf]) -> Result<Vec<SummaryRow>> {
    let mut rows = Vec::new();
    for p in paths {
        rows.extend(read_rows_csv(p)?);
    }
    Ok(summarize(&rows))
}

/// Plain-text table of a summary, for terminals.
pub fn render_summary(rows: &[SummaryRow]) -> String {
    let mut out = String::from("experiment\tsetting\truns\tdiverged\tmetric\tmean\tstd\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{:.6}\t{:.6}\n",
            r.experiment, r.setting, r.runs, r.diverged, r.metric, r.metric_mean, r.metric_std
        ));
    }
    out
}
