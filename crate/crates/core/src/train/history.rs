//! Per-epoch metrics and the append-only `history.csv` record.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const HISTORY_HEADER: &str = "epoch,train_loss,train_acc,val_loss,val_acc,wall_seconds";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub wall_seconds: f64,
}

impl EpochMetrics {
    fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{:.3}",
            self.epoch, self.train_loss, self.train_accuracy, self.val_loss, self.val_accuracy, self.wall_seconds
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochMetrics>,
    /// 1-based epoch of the first minimum of `val_loss`; 0 when empty.
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub checkpoint_path: PathBuf,
}

/// First epoch attaining the minimum validation loss.
pub fn best_epoch(epochs: &[EpochMetrics]) -> usize {
    let mut best: Option<&EpochMetrics> = None;
    for e in epochs {
        if best.is_none_or(|b| e.val_loss < b.val_loss) {
            best = Some(e);
        }
    }
    best.map_or(0, |b| b.epoch)
}

impl TrainingHistory {
    pub fn from_epochs(epochs: Vec<EpochMetrics>, stopped_early: bool, checkpoint_path: PathBuf) -> Self {
        TrainingHistory {
            best_epoch: best_epoch(&epochs),
            epochs,
            stopped_early,
            checkpoint_path,
        }
    }

    pub fn best(&self) -> Option<&EpochMetrics> {
        self.epochs.iter().find(|e| e.epoch == self.best_epoch)
    }

    pub fn epochs_trained(&self) -> usize {
        self.epochs.len()
    }

    /// Rebuild from a run directory. A run counts as stopped early when its
    /// last epoch is exactly `patience` past the best one and the epoch
    /// budget was not exhausted.
    pub fn from_run_dir(run_dir: &Path, patience: usize, max_epochs: usize) -> Result<Self> {
        let epochs = read_history_csv(&run_dir.join("history.csv"))?;
        let best = best_epoch(&epochs);
        let last = epochs.last().map_or(0, |e| e.epoch);
        let stopped_early = !epochs.is_empty() && last == best + patience && last < max_epochs;
        Ok(TrainingHistory {
            epochs,
            best_epoch: best,
            stopped_early,
            checkpoint_path: run_dir.join("best.ckpt"),
        })
    }
}

/// Appends one line per epoch, flushing each so an interrupted run leaves a
/// readable prefix.
pub struct HistoryWriter {
    file: BufWriter<File>,
    path: PathBuf,
}

impl HistoryWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut file = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        writeln!(file, "{HISTORY_HEADER}").map_err(|e| Error::io(path, e))?;
        file.flush().map_err(|e| Error::io(path, e))?;
        Ok(HistoryWriter {
            file,
            path: path.to_path_buf(),
        })
    }

    /// Continue an existing file without rewriting its header.
    pub fn append(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(HistoryWriter {
            file: BufWriter::new(file),
            path: path.to_path_buf(),
        })
    }

    pub fn record(&mut self, m: &EpochMetrics) -> Result<()> {
        writeln!(self.file, "{}", m.csv_line()).map_err(|e| Error::io(&self.path, e))?;
        self.file.flush().map_err(|e| Error::io(&self.path, e))?;
        self.file.get_ref().sync_data().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_history_csv(path: &Path) -> Result<Vec<EpochMetrics>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| Error::Parse { path: path.into(), line: 1, message: e.to_string() })?
        .iter()
        .collect::<Vec<_>>()
        .join(",");
    if header != HISTORY_HEADER {
        return Err(Error::Schema {
            path: path.into(),
            line: 1,
            message: format!("expected header `{HISTORY_HEADER}`, found `{header}`"),
        });
    }
    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let line = i as u64 + 2;
        let parse_err = |message: String| Error::Parse { path: path.into(), line, message };
        let row = row.map_err(|e| parse_err(e.to_string()))?;
        if row.len() != 6 {
            return Err(parse_err(format!("expected 6 fields, found {}", row.len())));
        }
        let f = |k: usize| -> Result<f64> {
            row[k].trim().parse().map_err(|_| parse_err(format!("bad number `{}`", &row[k])))
        };
        out.push(EpochMetrics {
            epoch: row[0].trim().parse().map_err(|_| parse_err(format!("bad epoch `{}`", &row[0])))?,
            train_loss: f(1)?,
            train_accuracy: f(2)?,
            val_loss: f(3)?,
            val_accuracy: f(4)?,
            wall_seconds: f(5)?,
        });
    }
    Ok(out)
}
