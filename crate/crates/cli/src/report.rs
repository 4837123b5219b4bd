//! Text tables, ROC exports and JSONL records.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rnode::EvalReport;
use serde::Serialize;

use crate::CliError;

pub struct Row<'a> {
    pub name: String,
    pub report: Option<&'a EvalReport>,
}

/// Aligned table with one row per model; failed rows are marked.
pub fn table(rows: &[Row<'_>]) -> String {
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(5);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$}  {:>8}  {:>6}  {:>6}  {:>6}  {:>9}",
        "Model", "Params", "AUC", "F1", "Recall", "Precision"
    );
    for r in rows {
        match r.report {
            Some(e) => {
                let auc = e
                    .weighted_auc
                    .map_or("n/a".to_string(), |a| format!("{a:.3}"));
                let _ = writeln!(
                    out,
                    "{:<width$}  {:>8}  {:>6}  {:>6.3}  {:>6.3}  {:>9.3}",
                    r.name,
                    e.param_count,
                    auc,
                    e.weighted_f1,
                    e.weighted_recall,
                    e.weighted_precision
                );
            }
            None => {
                let _ = writeln!(out, "{:<width$}  FAILED", r.name);
            }
        }
    }
    out
}

pub fn jsonl<T: Serialize>(records: &[T]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect()
}

#[derive(Serialize)]
pub struct ReportRecord<'a> {
    pub model: &'a str,
    pub split: &'a str,
    pub report: &'a EvalReport,
}

/// Writes `roc_class{c}.csv` for every class whose curve is defined.
pub fn write_roc(dir: &Path, report: &EvalReport) -> Result<(), CliError> {
    for (c, curve) in report.roc.iter().enumerate() {
        if let Some(points) = curve {
            let mut text = String::from("fpr,tpr\n");
            for (fpr, tpr) in points {
                let _ = writeln!(text, "{fpr},{tpr}");
            }
            fs::write(dir.join(format!("roc_class{c}.csv")), text)?;
        }
    }
    Ok(())
}
