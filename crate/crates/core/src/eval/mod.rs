//! Checkpoint evaluation, the per-model results table, training curves and
//! model ranking.
//!
//! Confusion matrices and per-class precision/recall/F1 go beyond the
//! accuracy/loss summary and are reported as extensions.

pub mod metrics;
pub mod plot;
pub mod report;
pub mod table;

pub use metrics::{ClassMetrics, ConfusionMatrix};
pub use plot::{curve_points, epoch_ticks, plot_curves, Metric};
pub use report::{evaluate, read_report, summarize_best, write_report, EvaluationReport, SplitMetrics};
pub use table::{emit_results_table, format_results_table, read_results_table, results_rows, ResultsRow, RESULTS_HEADER};
