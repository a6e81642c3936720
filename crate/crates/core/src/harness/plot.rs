use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One long-format row for plotting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub run: String,
    pub step_or_epoch: u64,
    pub metric: String,
    pub value: f64,
}

fn malformed(path: &Path, msg: impl Into<String>) -> Error {
    Error::File { path: path.to_path_buf(), msg: msg.into() }
}

fn parse_value(s: &str) -> Option<f64> {
    match s {
        "true" => Some(1.0),
        "false" => Some(0.0),
        _ => s.parse().ok(),
    }
}

/// Melts a metrics CSV whose first column is `step` or `epoch`. Boolean
/// columns become 1/0; empty cells are skipped.
pub fn melt_csv(run: &str, path: &Path) -> Result<Vec<PlotRow>> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| malformed(path, e.to_string()))?;
    let headers = rd.headers().map_err(|e| malformed(path, e.to_string()))?.clone();
    match headers.get(0) {
        Some("step") | Some("epoch") => {}
        other => return Err(malformed(path, format!("first column must be step or epoch, got {other:?}"))),
    }
    let mut out = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let rec = rec.map_err(|e| malformed(path, e.to_string()))?;
        let x: u64 = rec[0].parse().map_err(|_| malformed(path, format!("row {}: bad index '{}'", i + 1, &rec[0])))?;
        for (name, cell) in headers.iter().zip(rec.iter()).skip(1) {
            if cell.is_empty() {
                continue;
            }
            let value =
                parse_value(cell).ok_or_else(|| malformed(path, format!("row {}: bad value '{cell}' in {name}", i + 1)))?;
            out.push(PlotRow { run: run.to_string(), step_or_epoch: x, metric: name.to_string(), value });
        }
    }
    Ok(out)
}

/// Every `*.csv` metrics file in each run directory, named
/// `<dir name>/<file stem>`.
pub fn collect_plotdata(run_dirs: &[PathBuf]) -> Result<Vec<PlotRow>> {
    let mut out = Vec::new();
    for dir in run_dirs {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| malformed(dir, e.to_string()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        files.sort();
        let name = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        for f in files {
            let stem = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            // tables without a step or epoch index are not time series
            let first = csv::Reader::from_path(&f)
                .ok()
                .and_then(|mut r| r.headers().ok().and_then(|h| h.get(0).map(str::to_string)));
            if !matches!(first.as_deref(), Some("step") | Some("epoch")) {
                continue;
            }
            out.extend(melt_csv(&format!("{name}/{stem}"), &f)?);
        }
    }
    Ok(out)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| malformed(path, e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| malformed(path, e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
