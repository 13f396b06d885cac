//! Categorical cross-entropy.

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Error, Result};

/// Smallest probability fed to `ln` when scoring explicit probabilities.
pub const PROBABILITY_FLOOR: f64 = 1e-15;

#[derive(Debug, Clone)]
pub struct LossOutput {
    /// Mean (optionally class-weighted) loss over the batch.
    pub loss: f64,
    /// Unweighted per-sample `-log p(true class)`.
    pub per_sample: Array1<f64>,
    /// Gradient of `loss` with respect to the logits.
    pub grad_logits: Array2<f64>,
    pub correct: usize,
}

/// Index of the largest entry; the first wins on ties.
pub fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fused softmax + cross-entropy from logits via log-sum-exp. With
/// `class_weights`, sample losses are scaled by their class weight and the
/// sum is still divided by the batch size.
pub fn cross_entropy_from_logits(
    logits: ArrayView2<f64>,
    targets: &[usize],
    class_weights: Option<&[f64]>,
) -> Result<LossOutput> {
    let (n, k) = logits.dim();
    if n == 0 || n != targets.len() {
        return Err(Error::Shape(format!("{n} logit rows for {} targets", targets.len())));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
        return Err(Error::Shape(format!("target class {bad} out of range for {k} outputs")));
    }
    if class_weights.is_some_and(|w| w.len() != k) {
        return Err(Error::Shape(format!("class weights must have {k} entries")));
    }
    let mut per_sample = Array1::zeros(n);
    let mut grad = Array2::zeros((n, k));
    let mut total = 0.0;
    let mut correct = 0;
    for (i, row) in logits.rows().into_iter().enumerate() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        let t = targets[i];
        let loss = lse - row[t];
        let w = class_weights.map_or(1.0, |w| w[t]);
        per_sample[i] = loss;
        total += w * loss;
        for j in 0..k {
            let p = (row[j] - lse).exp();
            grad[[i, j]] = w * (p - if j == t { 1.0 } else { 0.0 }) / n as f64;
        }
        if argmax(row) == t {
            correct += 1;
        }
    }
    Ok(LossOutput {
        loss: total / n as f64,
        per_sample,
        grad_logits: grad,
        correct,
    })
}

/// Mean `-log p(true class)` for explicit probability rows and one-hot
/// targets. Probabilities are floored at [`PROBABILITY_FLOOR`].
pub fn categorical_cross_entropy(probabilities: ArrayView2<f64>, one_hot: ArrayView2<f64>) -> Result<f64> {
    if probabilities.dim() != one_hot.dim() || probabilities.nrows() == 0 {
        return Err(Error::Shape(format!(
            "probabilities {:?} vs targets {:?}",
            probabilities.dim(),
            one_hot.dim()
        )));
    }
    let mut total = 0.0;
    for (p, y) in probabilities.rows().into_iter().zip(one_hot.rows()) {
        if (p.sum() - 1.0).abs() > 1e-6 || p.iter().any(|&v| v < 0.0) {
            return Err(Error::Precondition(format!("row {p} is not a probability vector")));
        }
        let hot: Vec<usize> = (0..y.len()).filter(|&j| y[j] == 1.0).collect();
        if hot.len() != 1 || y.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Precondition(format!("target {y} is not one-hot")));
        }
        total -= p[hot[0]].max(PROBABILITY_FLOOR).ln();
    }
    Ok(total / probabilities.nrows() as f64)
}

/// Inverse-frequency weights `N / (K * n_c)`; absent classes get weight 0.
pub fn balanced_class_weights(targets: &[usize], num_classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; num_classes];
    for &t in targets {
        counts[t] += 1;
    }
    counts
        .iter()
        .map(|&c| {
            if c == 0 {
                0.0
            } else {
                targets.len() as f64 / (num_classes * c) as f64
            }
        })
        .collect()
}
