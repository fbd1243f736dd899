//! Line-oriented metrics files and summary tables.
//!
//! A metrics file is JSON Lines: a header object naming the schema and the
//! observation fields, then one [`MetricsRecord`] per controller decision.

use std::fmt::Write as _;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::stats::{t_test, RunSummary, TTest};
use super::{io_err, HarnessError, Result};
use crate::observe::FEATURE_NAMES;

pub const METRICS_SCHEMA: &str = "autolr-metrics";
pub const METRICS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub episode: u64,
    pub decision: u64,
    /// Trainee step count after the decision's interval.
    pub step: u64,
    /// Learning rate applied at the first step of the interval.
    pub lr: f64,
    pub train_loss: f64,
    /// Absent when the interval diverged.
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
    /// Observation the decision was made from, in `FEATURE_NAMES` order.
    pub observation: [f64; 7],
    pub action_raw: f64,
    pub scale: f64,
    pub reward: f64,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MetricsHeader {
    schema: String,
    version: u32,
    observation_fields: Vec<String>,
}

fn header() -> MetricsHeader {
    MetricsHeader {
        schema: METRICS_SCHEMA.to_string(),
        version: METRICS_VERSION,
        observation_fields: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
    }
}

pub fn write_metrics<W: Write>(records: &[MetricsRecord], mut w: W) -> std::io::Result<()> {
    serde_json::to_writer(&mut w, &header())?;
    writeln!(w)?;
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w)?;
    }
    w.flush()
}

pub fn parse_metrics(text: &str) -> std::result::Result<Vec<MetricsRecord>, String> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines.next().ok_or("missing header line")?;
    let h: MetricsHeader = serde_json::from_str(first).map_err(|e| format!("header: {e}"))?;
    if h != header() {
        return Err(format!("unsupported metrics header {} v{}", h.schema, h.version));
    }
    lines
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| format!("line {}: {e}", i + 1)))
        .collect()
}

pub fn emit_metrics(records: &[MetricsRecord], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    write_metrics(records, BufWriter::new(file)).map_err(io_err(path))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_metrics(&text).map_err(|message| HarnessError::Format {
        path: path.to_path_buf(),
        message,
    })
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    write_text(&text, path)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn write_text(text: &str, path: &Path) -> Result<()> {
    std::fs::write(path, text).map_err(io_err(path))
}

pub fn emit_summary(summary: &RunSummary, path: &Path) -> Result<()> {
    write_json(summary, path)
}

pub fn read_summary(path: &Path) -> Result<RunSummary> {
    read_json(path)
}

/// Fixed-width table of the headline numbers of each summary.
pub fn summary_table(summaries: &[&RunSummary]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<28} {:>4} {:>21} {:>21} {:>21}",
        "method", "runs", "test loss", "test accuracy", "best val loss"
    );
    for s in summaries {
        let _ = writeln!(
            out,
            "{:<28} {:>4} {:>10.6} ± {:<8.6} {:>10.6} ± {:<8.6} {:>10.6} ± {:<8.6}",
            s.label,
            s.runs,
            s.test_loss_mean,
            s.test_loss_std,
            s.test_accuracy_mean,
            s.test_accuracy_std,
            s.best_val_loss_mean,
            s.best_val_loss_std
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    pub test_loss: TTest,
    pub test_accuracy: TTest,
    pub best_val_loss: TTest,
}

pub fn compare(a: &RunSummary, b: &RunSummary) -> Result<Comparison> {
    Ok(Comparison {
        a: a.label.clone(),
        b: b.label.clone(),
        test_loss: t_test(&a.test_losses(), &b.test_losses())?,
        test_accuracy: t_test(&a.test_accuracies(), &b.test_accuracies())?,
        best_val_loss: t_test(&a.best_val_losses(), &b.best_val_losses())?,
    })
}

/// Summary table followed by the t-tests of `a` against `b`.
pub fn comparison_table(a: &RunSummary, b: &RunSummary) -> Result<String> {
    let c = compare(a, b)?;
    let mut out = summary_table(&[a, b]);
    let _ = writeln!(out, "\nt-test ({} vs {}), pooled variance, two-sided", c.a, c.b);
    let rows = [
        ("test loss", a.test_loss_mean - b.test_loss_mean, c.test_loss),
        ("test accuracy", a.test_accuracy_mean - b.test_accuracy_mean, c.test_accuracy),
        ("best val loss", a.best_val_loss_mean - b.best_val_loss_mean, c.best_val_loss),
    ];
    let _ = writeln!(out, "{:<14} {:>12} {:>10} {:>5} {:>12} {:>4}", "metric", "diff", "t", "df", "p", "sig");
    for (name, diff, t) in rows {
        let _ = writeln!(
            out,
            "{:<14} {:>12.6} {:>10.4} {:>5} {:>12.6e} {:>4}",
            name,
            diff,
            t.t,
            t.df,
            t.p_value,
            if t.significant { "yes" } else { "no" }
        );
    }
    Ok(out)
}
