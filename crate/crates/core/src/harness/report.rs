//! Method-by-mode summary over seeds.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

pub const MODES: [&str; 3] = ["easybg", "test-bg", "test-lv"];

/// Final returns of one finished run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub method: String,
    pub seed: u64,
    /// Returns in [`MODES`] order.
    pub returns: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    pub method: String,
    pub mode: String,
    pub mean: f64,
    /// Population standard deviation over seeds.
    pub std: f64,
    pub seeds: usize,
    /// Mean over the PPO mean for the same mode; empty without a usable PPO row.
    pub normalized: Option<f64>,
    /// Seeds present for some method but absent for this one, `;`-separated.
    pub missing_seeds: String,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Rows are ordered by method name, then mode.
pub fn build_report(runs: &[RunResult]) -> Result<Vec<ReportRow>> {
    if runs.is_empty() {
        return Err(Error::EmptyBuffer("no completed runs to report".into()));
    }
    let all_seeds: BTreeSet<u64> = runs.iter().map(|r| r.seed).collect();
    let mut by_method: BTreeMap<&str, Vec<&RunResult>> = BTreeMap::new();
    for r in runs {
        by_method.entry(&r.method).or_default().push(r);
    }
    let ppo_means: Option<[f64; 3]> = by_method.get("ppo").map(|rs| {
        std::array::from_fn(|m| mean_std(&rs.iter().map(|r| r.returns[m]).collect::<Vec<_>>()).0)
    });
    let mut rows = Vec::new();
    for (method, rs) in &by_method {
        let seeds: BTreeSet<u64> = rs.iter().map(|r| r.seed).collect();
        let missing: Vec<String> = all_seeds.difference(&seeds).map(u64::to_string).collect();
        for (m, mode) in MODES.iter().enumerate() {
            let xs: Vec<f64> = rs.iter().map(|r| r.returns[m]).collect();
            let (mean, std) = mean_std(&xs);
            let normalized = if *method == "ppo" {
                Some(1.0)
            } else {
                ppo_means.and_then(|p| (p[m] != 0.0).then(|| mean / p[m]))
            };
            rows.push(ReportRow {
                method: method.to_string(),
                mode: mode.to_string(),
                mean,
                std,
                seeds: xs.len(),
                normalized,
                missing_seeds: missing.join(";"),
            });
        }
    }
    Ok(rows)
}

pub fn render_table(rows: &[ReportRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<14} {:<8} {:>18} {:>10} {:>6}  flags", "method", "mode", "mean +- std", "norm", "seeds");
    for r in rows {
        let norm = r.normalized.map_or("-".to_string(), |v| format!("{v:.3}"));
        let flag = if r.missing_seeds.is_empty() {
            String::new()
        } else {
            format!("MISSING seeds {}", r.missing_seeds)
        };
        let _ = writeln!(
            out,
            "{:<14} {:<8} {:>18} {:>10} {:>6}  {}",
            r.method,
            r.mode,
            format!("{:.3} +- {:.3}", r.mean, r.std),
            norm,
            r.seeds,
            flag
        );
    }
    out.push_str("std is the population standard deviation over seeds.\n");
    out
}

/// Writes `report.csv` and `report.txt` into `dir`.
pub fn emit_report(dir: &Path, rows: &[ReportRow]) -> Result<()> {
    let csv_path = dir.join("report.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Error::io(&csv_path, std::io::Error::other(e)))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    let txt = dir.join("report.txt");
    std::fs::write(&txt, render_table(rows)).map_err(|e| Error::io(&txt, e))
}
