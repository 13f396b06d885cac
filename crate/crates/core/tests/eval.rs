use std::path::PathBuf;

use mri_bench_core::dataset::{scan_dataset, ClassLabel, Layout, Split};
use mri_bench_core::eval::{
    curve_points, emit_results_table, evaluate, plot_curves, read_results_table, summarize_best, ConfusionMatrix,
    EvaluationReport, Metric, SplitMetrics,
};
use mri_bench_core::model::checkpoint::save_checkpoint;
use mri_bench_core::model::head::HeadSpec;
use mri_bench_core::model::{build_model, BackboneId, BackboneSpec, BuildOptions, TrainableScope, WeightInit};
use mri_bench_core::synthetic::write_phantom_dataset;
use mri_bench_core::train::history::{EpochMetrics, TrainingHistory};
use mri_bench_core::Error;
use proptest::prelude::*;

fn history(val_losses: &[f64]) -> TrainingHistory {
    let epochs = val_losses
        .iter()
        .enumerate()
        .map(|(i, &v)| EpochMetrics {
            epoch: i + 1,
            train_loss: v + 0.1,
            train_accuracy: 0.5,
            val_loss: v,
            val_accuracy: 0.6,
            wall_seconds: 1.0,
        })
        .collect();
    TrainingHistory::from_epochs(epochs, false, PathBuf::new())
}

// counts by a map from (true, predicted) pairs, then checks every derived
// quantity against that tally
fn check_against_tally(truth: &[usize], predicted: &[usize]) {
    let m = ConfusionMatrix::from_predictions(truth, predicted, 4).unwrap();
    let mut tally = std::collections::HashMap::new();
    for pair in truth.iter().zip(predicted) {
        *tally.entry(pair).or_insert(0u64) += 1;
    }
    for t in 0..4 {
        for p in 0..4 {
            assert_eq!(m.counts[t][p], tally.get(&(&t, &p)).copied().unwrap_or(0));
        }
    }
    assert_eq!(m.total() as usize, truth.len());
    let correct = truth.iter().zip(predicted).filter(|(a, b)| a == b).count();
    if !truth.is_empty() {
        assert_eq!(m.accuracy(), correct as f64 / truth.len() as f64);
    }
    for (c, pc) in m.per_class().iter().enumerate() {
        let tp = truth.iter().zip(predicted).filter(|&(&t, &p)| t == c && p == c).count();
        let predicted_c = predicted.iter().filter(|&&p| p == c).count();
        let actual_c = truth.iter().filter(|&&t| t == c).count();
        assert_eq!(pc.precision_undefined, predicted_c == 0);
        assert_eq!(pc.recall_undefined, actual_c == 0);
        let precision = if predicted_c == 0 { 0.0 } else { tp as f64 / predicted_c as f64 };
        let recall = if actual_c == 0 { 0.0 } else { tp as f64 / actual_c as f64 };
        assert_eq!((pc.precision, pc.recall), (precision, recall));
    }
}

#[test]
fn twenty_hand_made_predictions() {
    let truth = [0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 2, 2, 2, 2, 2, 3, 3, 3, 3, 3];
    let predicted = [0, 0, 0, 1, 3, 1, 1, 1, 1, 1, 2, 2, 0, 2, 1, 3, 3, 3, 3, 2];
    check_against_tally(&truth, &predicted);
    let m = ConfusionMatrix::from_predictions(&truth, &predicted, 4).unwrap();
    assert_eq!(m.counts, vec![vec![3, 1, 0, 1], vec![0, 5, 0, 0], vec![1, 1, 3, 0], vec![0, 0, 1, 4]]);
    assert_eq!(m.accuracy(), 15.0 / 20.0);
}

proptest! {
    #[test]
    fn confusion_matches_tally(pairs in proptest::collection::vec((0usize..4, 0usize..4), 0..200)) {
        let (truth, predicted): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        check_against_tally(&truth, &predicted);
    }
}

#[test]
fn results_table_round_trips_and_empty_is_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let m = |a, l| SplitMetrics { accuracy: a, loss: l };
    let reports = vec![EvaluationReport::from_metrics("ResNet50", 2, m(0.123456, 1.0), m(0.5, 0.25))];
    let histories = vec![history(&[1.0, 0.5])];
    let out = dir.path().join("results.csv");
    emit_results_table(&reports, &histories, &out).unwrap();
    assert_eq!(
        std::fs::read_to_string(&out).unwrap(),
        "model,epochs,train_accuracy,train_loss,val_accuracy,val_loss\nResNet50,2,0.1235,1.0000,0.5000,0.2500\n"
    );
    let rows = read_results_table(&out).unwrap();
    assert_eq!(rows.len(), 1);
    assert!((rows[0].train_accuracy - 0.123456).abs() < 5e-5);

    emit_results_table(&[], &[], &out).unwrap();
    assert!(read_results_table(&out).unwrap().is_empty());
}

#[test]
fn missing_report_metrics_come_from_best_epoch() {
    let mut r = EvaluationReport::from_metrics("a", 0, SplitMetrics { accuracy: 0.0, loss: 0.0 }, SplitMetrics { accuracy: 0.9, loss: 0.1 });
    r.train = None;
    let rows = mri_bench_core::eval::results_rows(&[r], &[history(&[0.9, 0.3, 0.4])]).unwrap();
    assert_eq!(rows[0].epochs, 3);
    assert_eq!(rows[0].train_loss, 0.3 + 0.1);
}

#[test]
fn ranking_puts_missing_validation_last() {
    let mut r = EvaluationReport::from_metrics("a", 1, SplitMetrics { accuracy: 1.0, loss: 0.0 }, SplitMetrics { accuracy: 1.0, loss: 0.0 });
    r.val = None;
    let s = EvaluationReport::from_metrics("z", 1, SplitMetrics { accuracy: 0.1, loss: 9.0 }, SplitMetrics { accuracy: 0.1, loss: 9.0 });
    assert_eq!(summarize_best(&[r, s]), ["z", "a"]);
}

#[test]
fn curves_are_written_for_each_history_length() {
    let dir = tempfile::tempdir().unwrap();
    let short = history(&[1.0, 0.8, 0.9]);
    let long = history(&[1.0, 0.7, 0.6, 0.65, 0.7]);
    for metric in [Metric::Accuracy, Metric::Loss] {
        for split in [Split::Train, Split::Val] {
            let path = plot_curves(&[("a", &short), ("b", &long)], metric, split, dir.path()).unwrap();
            assert_eq!(path.file_name().unwrap().to_str().unwrap(), format!("{metric}_{split}.png"));
            assert!(std::fs::metadata(&path).unwrap().len() > 0);
        }
    }
    assert_eq!(curve_points(&short, Metric::Loss, Split::Val).unwrap().len(), 3);
    assert_eq!(curve_points(&long, Metric::Loss, Split::Val).unwrap().last().unwrap().0, 5);
    let empty = history(&[]);
    assert!(plot_curves(&[("e", &empty)], Metric::Loss, Split::Val, dir.path()).is_err());
}

#[test]
fn validation_loss_curve_minimum_is_at_epoch_21() {
    let losses: Vec<f64> = (1..=30).map(|e| 0.4 + 0.01 * (e as f64 - 21.0).abs()).collect();
    let points = curve_points(&history(&losses), Metric::Loss, Split::Val).unwrap();
    let min = points.iter().min_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
    assert_eq!(min.0, 21);
}

#[test]
fn checkpoint_evaluation_accounts_for_every_image_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    write_phantom_dataset(&data, Layout::PreSplit, &[(2, 3), (2, 1), (2, 2), (2, 4)], 32, 5).unwrap();
    let manifest = scan_dataset(&data, Layout::PreSplit).unwrap();
    let model = build_model(
        BackboneSpec::new(BackboneId::ResNet50, (32, 32), WeightInit::Random),
        HeadSpec { dense_widths: vec![8], ..Default::default() },
        TrainableScope::HeadOnly,
        &BuildOptions::default(),
    )
    .unwrap();
    let ckpt = dir.path().join("best.ckpt");
    save_checkpoint(&model, &ckpt).unwrap();

    let a = evaluate(&ckpt, &manifest, Split::Val, 3).unwrap();
    let b = evaluate(&ckpt, &manifest, Split::Val, 5).unwrap();
    assert_eq!(a.confusion, b.confusion);
    assert_eq!(a.confusion.total(), 10);
    let expected_rows: Vec<u64> = ClassLabel::ALL
        .iter()
        .map(|&c| manifest.class_split_count(c, Split::Val) as u64)
        .collect();
    assert_eq!(a.confusion.row_sums(), expected_rows);
    let val = a.val.unwrap();
    assert_eq!(val.accuracy, a.confusion.trace() as f64 / a.confusion.total() as f64);
    let again = evaluate(&ckpt, &manifest, Split::Val, 3).unwrap();
    assert_eq!(again, a);
    // batch composition changes f32 summation order in the backbone only
    let other = b.val.unwrap().loss;
    assert!((val.loss - other).abs() <= 1e-4 * val.loss.abs().max(1.0), "{} vs {other}", val.loss);
    assert_eq!((a.model_id.as_str(), a.train), ("ResNet50", None));

    let mut three = manifest.clone();
    three.class_names.pop();
    assert!(matches!(evaluate(&ckpt, &three, Split::Val, 4), Err(Error::Incompatible { .. })));
}
