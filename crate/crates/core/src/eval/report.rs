use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{ClassMetrics, ConfusionMatrix};
use crate::dataset::{ClassLabel, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::model::checkpoint::{load_checkpoint, write_atomic};
use crate::pipeline::{FileSource, SampleSource};
use crate::train::history::{read_history_csv, TrainingHistory};
use crate::train::{evaluate_source, loss::argmax};

/// Loss and accuracy on one split.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub accuracy: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub model_id: String,
    pub epochs_trained: usize,
    /// Which split the confusion matrix was computed on.
    pub split: String,
    pub train: Option<SplitMetrics>,
    pub val: Option<SplitMetrics>,
    pub confusion: ConfusionMatrix,
    pub per_class: Vec<ClassMetrics>,
}

impl EvaluationReport {
    /// Report carrying only scalar metrics, as read back from a results table.
    pub fn from_metrics(model_id: impl Into<String>, epochs: usize, train: SplitMetrics, val: SplitMetrics) -> Self {
        EvaluationReport {
            model_id: model_id.into(),
            epochs_trained: epochs,
            split: Split::Val.as_str().to_owned(),
            train: Some(train),
            val: Some(val),
            confusion: ConfusionMatrix::zeros(ClassLabel::COUNT),
            per_class: Vec::new(),
        }
    }

    /// Zero-denominator precision or recall entries.
    pub fn undefined_metrics(&self) -> Vec<String> {
        let mut out = Vec::new();
        for c in &self.per_class {
            if c.precision_undefined {
                out.push(format!("precision of {} (never predicted)", c.class));
            }
            if c.recall_undefined {
                out.push(format!("recall of {} (no samples)", c.class));
            }
        }
        out
    }
}

/// Inference-mode evaluation of a checkpoint on one manifest split.
///
/// The metrics for the other split and the epoch count are filled from a
/// `history.csv` next to the checkpoint when one exists.
pub fn evaluate(checkpoint: &Path, manifest: &DatasetManifest, split: Split, batch_size: usize) -> Result<EvaluationReport> {
    if split == Split::Unassigned {
        return Err(Error::Argument("evaluation split must be train or val".into()));
    }
    let model = load_checkpoint(checkpoint, None)?;
    let classes = model.head_spec.num_classes;
    if manifest.class_names.len() != classes {
        return Err(Error::Incompatible {
            what: "number of classes".into(),
            expected: classes.to_string(),
            found: manifest.class_names.len().to_string(),
        });
    }
    let source = FileSource::from_manifest(manifest, split);
    if source.is_empty() {
        return Err(Error::Precondition(format!("manifest has no {split} images")));
    }
    let (loss, accuracy, logits) = evaluate_source(&model, &source, batch_size, None)?;
    let truth: Vec<usize> = source.labels().iter().map(|l| l.index()).collect();
    let predicted: Vec<usize> = logits.rows().into_iter().map(argmax).collect();
    let confusion = ConfusionMatrix::from_predictions(&truth, &predicted, classes)?;
    let measured = SplitMetrics { accuracy, loss };

    let history_path = checkpoint.with_file_name("history.csv");
    let history = if history_path.exists() {
        Some(TrainingHistory::from_epochs(read_history_csv(&history_path)?, false, checkpoint.to_path_buf()))
    } else {
        None
    };
    let best = history.as_ref().and_then(|h| h.best());
    let recorded = |train: bool| {
        best.map(|e| match train {
            true => SplitMetrics { accuracy: e.train_accuracy, loss: e.train_loss },
            false => SplitMetrics { accuracy: e.val_accuracy, loss: e.val_loss },
        })
    };
    let (train, val) = match split {
        Split::Train => (Some(measured), recorded(false)),
        _ => (recorded(true), Some(measured)),
    };
    Ok(EvaluationReport {
        model_id: model.backbone_spec.id.info().display_name.to_owned(),
        epochs_trained: history.map_or(0, |h| h.epochs.len()),
        split: split.as_str().to_owned(),
        train,
        val,
        per_class: confusion.per_class(),
        confusion,
    })
}

/// Nested key-value text (TOML).
pub fn write_report(report: &EvaluationReport, path: &Path) -> Result<()> {
    #[derive(Serialize)]
    struct Doc<'a> {
        /// Confusion matrix and per-class metrics extend the accuracy/loss
        /// summary.
        extensions: &'static str,
        report: &'a EvaluationReport,
    }
    let text = toml::to_string(&Doc {
        extensions: "confusion, per_class",
        report,
    })
    .map_err(|e| Error::Config(e.to_string()))?;
    write_atomic(path, |tmp| fs::write(tmp, &text).map_err(|e| Error::io(tmp, e)))
}

pub fn read_report(path: &Path) -> Result<EvaluationReport> {
    #[derive(Deserialize)]
    struct Doc {
        report: EvaluationReport,
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: Doc = toml::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    })?;
    Ok(doc.report)
}

/// Model ids ordered by validation accuracy (descending), then validation
/// loss (ascending), then id. Reports without validation metrics go last.
pub fn summarize_best(reports: &[EvaluationReport]) -> Vec<String> {
    let mut sorted: Vec<&EvaluationReport> = reports.iter().collect();
    sorted.sort_by(|a, b| match (a.val, b.val) {
        (Some(x), Some(y)) => y
            .accuracy
            .total_cmp(&x.accuracy)
            .then(x.loss.total_cmp(&y.loss))
            .then_with(|| a.model_id.cmp(&b.model_id)),
        (Some(_), None) => Ordering::Less,
        (None, Some(_)) => Ordering::Greater,
        (None, None) => a.model_id.cmp(&b.model_id),
    });
    sorted.into_iter().map(|r| r.model_id.clone()).collect()
}
