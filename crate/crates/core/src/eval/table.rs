use std::fs;
use std::path::Path;

use super::report::{EvaluationReport, SplitMetrics};
use crate::error::{Error, Result};
use crate::model::checkpoint::write_atomic;
use crate::train::history::TrainingHistory;

pub const RESULTS_HEADER: [&str; 6] = ["model", "epochs", "train_accuracy", "train_loss", "val_accuracy", "val_loss"];

#[derive(Debug, Clone, PartialEq)]
pub struct ResultsRow {
    pub model: String,
    pub epochs: usize,
    pub train_accuracy: f64,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub val_loss: f64,
}

/// One row per (report, history) pair. Epochs is the history length; a
/// metric missing from the report falls back to the history's best epoch.
pub fn results_rows(reports: &[EvaluationReport], histories: &[TrainingHistory]) -> Result<Vec<ResultsRow>> {
    if reports.len() != histories.len() {
        return Err(Error::Argument(format!(
            "{} reports but {} histories",
            reports.len(),
            histories.len()
        )));
    }
    reports
        .iter()
        .zip(histories)
        .map(|(r, h)| {
            let best = h.best();
            let pick = |m: Option<SplitMetrics>, train: bool| -> Result<SplitMetrics> {
                m.or_else(|| {
                    best.map(|e| match train {
                        true => SplitMetrics { accuracy: e.train_accuracy, loss: e.train_loss },
                        false => SplitMetrics { accuracy: e.val_accuracy, loss: e.val_loss },
                    })
                })
                .ok_or_else(|| Error::Precondition(format!("no metrics recorded for {}", r.model_id)))
            };
            let (train, val) = (pick(r.train, true)?, pick(r.val, false)?);
            Ok(ResultsRow {
                model: r.model_id.clone(),
                epochs: h.epochs.len(),
                train_accuracy: train.accuracy,
                train_loss: train.loss,
                val_accuracy: val.accuracy,
                val_loss: val.loss,
            })
        })
        .collect()
}

pub fn format_results_table(rows: &[ResultsRow]) -> String {
    let mut out = RESULTS_HEADER.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.4},{:.4},{:.4},{:.4}\n",
            r.model, r.epochs, r.train_accuracy, r.train_loss, r.val_accuracy, r.val_loss
        ));
    }
    out
}

pub fn emit_results_table(reports: &[EvaluationReport], histories: &[TrainingHistory], out: &Path) -> Result<Vec<ResultsRow>> {
    let rows = results_rows(reports, histories)?;
    let text = format_results_table(&rows);
    write_atomic(out, |tmp| fs::write(tmp, &text).map_err(|e| Error::io(tmp, e)))?;
    Ok(rows)
}

pub fn read_results_table(path: &Path) -> Result<Vec<ResultsRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| parse_error(path, 0, e.to_string()))?;
    let header = reader.headers().map_err(|e| parse_error(path, 1, e.to_string()))?;
    if header.iter().ne(RESULTS_HEADER) {
        return Err(Error::Schema {
            path: path.to_path_buf(),
            line: 1,
            message: format!("expected header `{}`", RESULTS_HEADER.join(",")),
        });
    }
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i as u64 + 2;
        let record = record.map_err(|e| parse_error(path, line, e.to_string()))?;
        let num = |k: usize| -> Result<f64> {
            record[k]
                .parse()
                .map_err(|_| parse_error(path, line, format!("bad {} `{}`", RESULTS_HEADER[k], &record[k])))
        };
        rows.push(ResultsRow {
            model: record[0].to_owned(),
            epochs: record[1]
                .parse()
                .map_err(|_| parse_error(path, line, format!("bad epochs `{}`", &record[1])))?,
            train_accuracy: num(2)?,
            train_loss: num(3)?,
            val_accuracy: num(4)?,
            val_loss: num(5)?,
        });
    }
    Ok(rows)
}

fn parse_error(path: &Path, line: u64, message: String) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    }
}
