//! Per-(dataset, method) summaries of run records.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::records::{Metrics, RunRecord};

/// Mean and standard deviation of one metric across runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation; zero for a single run.
    pub std: f64,
    pub runs: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self {
            mean,
            std,
            runs: values.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub dataset: String,
    pub method: String,
    pub metric: &'static str,
    pub summary: Summary,
    pub best: bool,
}

pub fn higher_is_better(metric: &str) -> bool {
    metric == "auc"
}

/// The normalized metrics of a record, falling back to raw values when the
/// record was not normalized.
fn reported(record: &RunRecord) -> &Metrics {
    record.normalized.as_ref().unwrap_or(&record.metrics)
}

/// Rows sorted by dataset, method, then metric, with exactly one `best` row per
/// (dataset, metric). Ties go to the lexicographically smallest method name.
pub fn summarize(records: &[RunRecord]) -> Vec<ReportRow> {
    let mut groups: BTreeMap<(&str, &str), Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.dataset.as_str(), r.method.as_str()))
            .or_default()
            .push(r);
    }
    let mut rows = Vec::new();
    for ((dataset, method), runs) in &groups {
        for metric in Metrics::NAMES {
            let values: Vec<f64> = runs.iter().filter_map(|r| reported(r).get(metric)).collect();
            if let Some(summary) = Summary::of(&values) {
                rows.push(ReportRow {
                    dataset: dataset.to_string(),
                    method: method.to_string(),
                    metric,
                    summary,
                    best: false,
                });
            }
        }
    }
    let mut winners: BTreeMap<(String, &'static str), usize> = BTreeMap::new();
    for (i, row) in rows.iter().enumerate() {
        let key = (row.dataset.clone(), row.metric);
        let better = match winners.get(&key) {
            None => true,
            Some(&j) => {
                let (a, b) = (row.summary.mean, rows[j].summary.mean);
                // rows arrive in method-name order, so strict improvement keeps the smallest name on ties
                if higher_is_better(row.metric) {
                    a > b
                } else {
                    a < b
                }
            }
        };
        if better {
            winners.insert(key, i);
        }
    }
    for &i in winners.values() {
        rows[i].best = true;
    }
    rows
}

pub fn render_table(rows: &[ReportRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<28} {:<12} {:<10} {:>24} {:>4}  best",
        "dataset", "method", "metric", "mean ± std", "runs"
    );
    for r in rows {
        let cell = format!("{:.4} ± {:.4}", r.summary.mean, r.summary.std);
        let _ = writeln!(
            out,
            "{:<28} {:<12} {:<10} {:>24} {:>4}  {}",
            r.dataset,
            r.method,
            r.metric,
            cell,
            r.summary.runs,
            if r.best { "*" } else { "" }
        );
    }
    out
}

pub fn write_csv<W: std::io::Write>(rows: &[ReportRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["dataset", "method", "metric", "mean", "std", "runs", "best"])?;
    for r in rows {
        w.write_record([
            r.dataset.clone(),
            r.method.clone(),
            r.metric.to_string(),
            r.summary.mean.to_string(),
            r.summary.std.to_string(),
            r.summary.runs.to_string(),
            r.best.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
