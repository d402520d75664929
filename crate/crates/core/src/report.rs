//! Result files: `results.json`, `curves.csv`, `summary.csv`, `ablation.csv`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::metrics::RoundReport;

pub const RESULTS_SCHEMA_VERSION: u32 = 1;
pub const CURVES_HEADER: &str =
    "round,method,seed,mean_accuracy,confusion_errors,forgetting_errors";

/// Fixed 17-significant-digit rendering (round-trips every `f64`).
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Debug, Serialize)]
pub struct ResultsFile<'a, C: Serialize> {
    pub schema_version: u32,
    pub command: &'a str,
    pub config: &'a C,
    pub runs: &'a [RoundReport],
}

pub fn write_results_json<C: Serialize>(
    path: &Path,
    command: &str,
    config: &C,
    runs: &[RoundReport],
) -> Result<()> {
    let file = ResultsFile {
        schema_version: RESULTS_SCHEMA_VERSION,
        command,
        config,
        runs,
    };
    let mut text = serde_json::to_string_pretty(&file)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn curves_csv(runs: &[RoundReport]) -> String {
    let mut out = String::from(CURVES_HEADER);
    out.push('\n');
    for r in runs {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.round,
            r.method,
            r.seed,
            fmt_f64(r.mean_accuracy),
            r.confusion_errors,
            r.forgetting_errors
        );
    }
    out
}

/// Seed-averaged values for one (method, round).
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    pub round: usize,
    pub seeds: usize,
    pub mean_accuracy: f64,
    pub confusion_errors: f64,
    pub forgetting_errors: f64,
}

/// Averages reports over seeds, keeping methods in first-seen order.
pub fn summarize(runs: &[RoundReport]) -> Vec<SummaryRow> {
    let mut order: Vec<String> = Vec::new();
    let mut acc: BTreeMap<(usize, usize), (usize, f64, f64, f64)> = BTreeMap::new();
    for r in runs {
        let mi = match order.iter().position(|m| *m == r.method) {
            Some(i) => i,
            None => {
                order.push(r.method.clone());
                order.len() - 1
            }
        };
        let e = acc.entry((mi, r.round)).or_default();
        e.0 += 1;
        e.1 += r.mean_accuracy;
        e.2 += r.confusion_errors as f64;
        e.3 += r.forgetting_errors as f64;
    }
    acc.into_iter()
        .map(|((mi, round), (n, a, c, f))| {
            let k = n as f64;
            SummaryRow {
                method: order[mi].clone(),
                round,
                seeds: n,
                mean_accuracy: a / k,
                confusion_errors: c / k,
                forgetting_errors: f / k,
            }
        })
        .collect()
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out =
        String::from("round,method,seeds,mean_accuracy,confusion_errors,forgetting_errors\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.round,
            r.method,
            r.seeds,
            fmt_f64(r.mean_accuracy),
            fmt_f64(r.confusion_errors),
            fmt_f64(r.forgetting_errors)
        );
    }
    out
}

/// Human-readable summary table.
pub fn summary_table(rows: &[SummaryRow]) -> String {
    let width = rows
        .iter()
        .map(|r| r.method.len())
        .max()
        .unwrap_or(6)
        .max(6);
    let mut out = format!(
        "{:<width$}  {:>5}  {:>9}  {:>9}  {:>10}\n",
        "method", "round", "accuracy", "confusion", "forgetting"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>5}  {:>9.4}  {:>9.1}  {:>10.1}",
            r.method, r.round, r.mean_accuracy, r.confusion_errors, r.forgetting_errors
        );
    }
    out
}

/// Final-round and average-over-rounds accuracy of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub final_accuracy: f64,
    pub avg_over_rounds: f64,
}

pub fn ablation_row(variant: &str, seed: u64, reports: &[RoundReport]) -> Option<AblationRow> {
    let last = reports.last()?;
    Some(AblationRow {
        variant: variant.to_string(),
        seed,
        final_accuracy: last.mean_accuracy,
        avg_over_rounds: reports.iter().map(|r| r.mean_accuracy).sum::<f64>()
            / reports.len() as f64,
    })
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,seed,final_accuracy,avg_over_rounds\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.variant,
            r.seed,
            fmt_f64(r.final_accuracy),
            fmt_f64(r.avg_over_rounds)
        );
    }
    out
}
