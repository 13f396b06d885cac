use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::OnceLock;

use plotters::prelude::*;
use plotters::style::FontStyle;

use crate::dataset::Split;
use crate::error::{Error, Result};
use crate::train::history::TrainingHistory;

const FONT_PATHS: [&str; 2] = [
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Accuracy,
    Loss,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::Loss => "loss",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "accuracy" => Ok(Metric::Accuracy),
            "loss" => Ok(Metric::Loss),
            other => Err(format!("unknown metric `{other}` (expected accuracy or loss)")),
        }
    }
}

/// `(epoch, value)` pairs for one curve.
pub fn curve_points(history: &TrainingHistory, metric: Metric, split: Split) -> Result<Vec<(usize, f64)>> {
    let pick = match (metric, split) {
        (Metric::Accuracy, Split::Train) => |e: &crate::train::history::EpochMetrics| e.train_accuracy,
        (Metric::Loss, Split::Train) => |e: &crate::train::history::EpochMetrics| e.train_loss,
        (Metric::Accuracy, Split::Val) => |e: &crate::train::history::EpochMetrics| e.val_accuracy,
        (Metric::Loss, Split::Val) => |e: &crate::train::history::EpochMetrics| e.val_loss,
        (_, Split::Unassigned) => return Err(Error::Argument("curves exist only for train and val".into())),
    };
    Ok(history.epochs.iter().map(|e| (e.epoch, pick(e))).collect())
}

/// Labelled x positions: every epoch for short runs, thinned so at most 12
/// labels are drawn otherwise. Always starts at 1 and ends at the last epoch.
pub fn epoch_ticks(last_epoch: usize) -> Vec<usize> {
    if last_epoch == 0 {
        return Vec::new();
    }
    let step = last_epoch.div_ceil(12).max(1);
    let mut ticks: Vec<usize> = (1..=last_epoch).step_by(step).collect();
    if ticks.last() != Some(&last_epoch) {
        ticks.push(last_epoch);
    }
    ticks
}

/// Registers a system font once; plots are drawn without text when none is
/// available.
fn font_available() -> bool {
    static AVAILABLE: OnceLock<bool> = OnceLock::new();
    *AVAILABLE.get_or_init(|| {
        let Some(bytes) = FONT_PATHS.iter().find_map(|p| std::fs::read(p).ok()) else {
            log::warn!("no TrueType font found; plots will have no text");
            return false;
        };
        let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
        plotters::style::register_font("sans-serif", FontStyle::Normal, bytes).is_ok()
    })
}

fn plot_err(e: impl fmt::Debug) -> Error {
    Error::Plot(format!("{e:?}"))
}

/// Draws one line per `(label, history)` into `{metric}_{split}.png` under
/// `out_dir` and returns the file path.
pub fn plot_curves(series: &[(&str, &TrainingHistory)], metric: Metric, split: Split, out_dir: &Path) -> Result<PathBuf> {
    let mut curves = Vec::with_capacity(series.len());
    for (label, h) in series {
        if h.epochs.is_empty() {
            return Err(Error::Precondition(format!("history of {label} is empty")));
        }
        curves.push((*label, curve_points(h, metric, split)?));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let path = out_dir.join(format!("{metric}_{split}.png"));

    let last_epoch = curves.iter().flat_map(|(_, c)| c.iter().map(|p| p.0)).max().unwrap_or(1);
    let values = curves.iter().flat_map(|(_, c)| c.iter().map(|p| p.1)).filter(|v| v.is_finite());
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let (lo, hi) = match metric {
        Metric::Accuracy => (0.0, 1.0),
        Metric::Loss if lo.is_finite() => (lo.min(0.0), if hi > lo { hi * 1.05 } else { lo + 1.0 }),
        Metric::Loss => (0.0, 1.0),
    };
    let text = font_available();
    let ticks = epoch_ticks(last_epoch);

    let root = BitMapBackend::new(&path, (900, 600)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let x_hi = (last_epoch as f64 + 0.5).max(1.5);
    let mut builder = ChartBuilder::on(&root);
    builder.margin(20);
    if text {
        builder
            .caption(format!("{} {}", split, metric), ("sans-serif", 24))
            .x_label_area_size(40)
            .y_label_area_size(60);
    }
    let mut chart = builder.build_cartesian_2d(0.5..x_hi, lo..hi).map_err(plot_err)?;
    if text {
        let tick_set = ticks.clone();
        chart
            .configure_mesh()
            .x_desc("epoch")
            .y_desc(metric.as_str())
            .x_labels(ticks.len() * 4)
            .x_label_formatter(&|x| {
                let e = x.round() as usize;
                if (x - x.round()).abs() < 1e-6 && tick_set.contains(&e) {
                    e.to_string()
                } else {
                    String::new()
                }
            })
            .draw()
            .map_err(plot_err)?;
    }
    for (i, (label, points)) in curves.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let line = LineSeries::new(points.iter().map(|&(e, v)| (e as f64, v)), color.stroke_width(2));
        let drawn = chart.draw_series(line).map_err(plot_err)?;
        if text {
            drawn
                .label(*label)
                .legend(move |(x, y)| PathElement::new([(x, y), (x + 20, y)], color.stroke_width(2)));
        }
    }
    if text {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)?;
    drop(chart);
    drop(root);
    Ok(path)
}
