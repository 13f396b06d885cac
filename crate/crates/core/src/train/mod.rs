//! Adam training of categorical cross-entropy with per-epoch validation,
//! best-checkpoint saving, and patience-based early stopping.

pub mod adam;
pub mod early_stop;
pub mod history;
pub mod loss;

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use candle_core::Tensor;
use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{draw_augmentation, sample_rng, AugmentDraw, AugmentationSpec};
use crate::error::{Error, Result};
use crate::model::backbone::ParamKind;
use crate::model::checkpoint::{save_checkpoint, write_sidecar, CheckpointMeta};
use crate::model::head::{pool_backward, Mode};
use crate::model::{array4_to_tensor, tensor_to_array4, ModelHandle, TrainableScope};
use crate::pipeline::{load_batch, pooled_features, FeatureCache, SampleSource};
use crate::seed::{self, role};
pub use adam::{adam_step, AdamConfig, AdamState};
pub use early_stop::{update_early_stop, EarlyStopDecision, EarlyStopState};
pub use history::{EpochMetrics, HistoryWriter, TrainingHistory};
pub use loss::{categorical_cross_entropy, cross_entropy_from_logits};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without strict validation-loss improvement before stopping.
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Seed for initialization, shuffling, augmentation, and dropout.
    pub seed: u64,
    /// Weight the loss by inverse class frequency of the training split.
    pub class_weighting: bool,
    /// Batch size for validation and feature extraction.
    pub eval_batch_size: usize,
    /// Memory for cached frozen-backbone features (head_only only).
    pub feature_cache_mb: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            learning_rate: 0.001,
            batch_size: 8,
            max_epochs: 50,
            patience: 9,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            seed: 42,
            class_weighting: false,
            eval_batch_size: 16,
            feature_cache_mb: 2048,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("batch sizes must be at least 1".into()));
        }
        if self.patience == 0 || self.patience > self.max_epochs {
            return Err(Error::Config(format!(
                "patience must lie in [1, max_epochs={}], got {}",
                self.max_epochs, self.patience
            )));
        }
        self.adam().validate()
    }
}

/// Class indices of a source, checked against the head width.
fn targets(source: &dyn SampleSource, num_classes: usize) -> Result<Vec<usize>> {
    let t: Vec<usize> = source.labels().iter().map(|l| l.index()).collect();
    if let Some(&bad) = t.iter().find(|&&c| c >= num_classes) {
        return Err(Error::Incompatible {
            what: "number of classes".into(),
            expected: format!("labels below {num_classes}"),
            found: format!("label index {bad}"),
        });
    }
    Ok(t)
}

/// Mean loss and accuracy of the model on `source` in inference mode.
pub fn evaluate_source(
    model: &ModelHandle,
    source: &dyn SampleSource,
    batch_size: usize,
    cache: Option<&mut FeatureCache>,
) -> Result<(f64, f64, Array2<f64>)> {
    let t = targets(source, model.head_spec.num_classes)?;
    let pooled = pooled_features(model, source, batch_size, cache)?;
    let logits = model.head_logits(&pooled)?;
    let out = cross_entropy_from_logits(logits.view(), &t, None)?;
    Ok((out.loss, out.correct as f64 / t.len() as f64, logits))
}

struct BackboneOptimizer {
    names: Vec<String>,
    state: AdamState<f32>,
}

impl BackboneOptimizer {
    fn new(model: &ModelHandle) -> Self {
        let weights: Vec<_> = model
            .store
            .entries()
            .filter(|(_, e)| e.kind == ParamKind::Weight)
            .map(|(n, e)| (n.clone(), e.var.elem_count()))
            .collect();
        BackboneOptimizer {
            state: AdamState::new(weights.iter().map(|w| w.1)),
            names: weights.into_iter().map(|w| w.0).collect(),
        }
    }

    /// Backpropagate `grad_features` through the backbone and step Adam.
    fn step(&mut self, model: &ModelHandle, features: &Tensor, grad_features: &Tensor, lr: f64, cfg: &AdamConfig) -> Result<()> {
        // d/dθ sum(f(θ) * g) = (df/dθ)ᵀ g, the required vector-Jacobian product
        let surrogate = (features * grad_features)?.sum_all()?;
        let grads = surrogate.backward()?;
        let mut values = Vec::with_capacity(self.names.len());
        let mut grad_values = Vec::with_capacity(self.names.len());
        for name in &self.names {
            let var = &model.store.get(name).expect("registered weight").var;
            values.push(var.flatten_all()?.to_vec1::<f32>()?);
            grad_values.push(match grads.get(var.as_tensor()) {
                Some(g) => g.flatten_all()?.to_vec1::<f32>()?,
                None => vec![0.0; var.elem_count()],
            });
        }
        {
            let mut params: Vec<&mut [f32]> = values.iter_mut().map(|v| v.as_mut_slice()).collect();
            let grads: Vec<&[f32]> = grad_values.iter().map(|g| g.as_slice()).collect();
            adam_step(&mut params, &grads, &mut self.state, lr, cfg)?;
        }
        for (name, v) in self.names.iter().zip(values) {
            let var = &model.store.get(name).expect("registered weight").var;
            var.set(&Tensor::from_vec(v, var.shape(), var.device())?)?;
        }
        Ok(())
    }
}

struct RunLog {
    path: std::path::PathBuf,
}

impl RunLog {
    fn line(&self, msg: &str) -> Result<()> {
        log::info!("{msg}");
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        writeln!(f, "{msg}").map_err(|e| Error::io(&self.path, e))
    }
}

/// Run the full protocol. `observer` sees each epoch as soon as it is
/// recorded. The run directory receives `history.csv`, `log.txt`,
/// `best.ckpt` with its `.meta` sidecar, and `config.snapshot` if the caller
/// has not already written one.
pub fn train(
    model: &mut ModelHandle,
    train_set: &dyn SampleSource,
    val_set: &dyn SampleSource,
    config: &TrainConfig,
    augment: &AugmentationSpec,
    run_dir: &Path,
    observer: &mut dyn FnMut(&EpochMetrics),
) -> Result<TrainingHistory> {
    config.validate()?;
    augment.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Precondition(format!(
            "training needs non-empty splits, got {} train / {} val images",
            train_set.len(),
            val_set.len()
        )));
    }
    let num_classes = model.head_spec.num_classes;
    let train_targets = targets(train_set, num_classes)?;
    targets(val_set, num_classes)?;
    let class_weights = config
        .class_weighting
        .then(|| loss::balanced_class_weights(&train_targets, num_classes));

    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let snapshot = run_dir.join("config.snapshot");
    if !snapshot.exists() {
        #[derive(Serialize)]
        struct Snapshot<'a> {
            train: &'a TrainConfig,
            augment: &'a AugmentationSpec,
        }
        let text = toml::to_string(&Snapshot { train: config, augment })
            .map_err(|e| Error::Config(e.to_string()))?;
        fs::write(&snapshot, text).map_err(|e| Error::io(&snapshot, e))?;
    }
    let log = RunLog { path: run_dir.join("log.txt") };
    let checkpoint_path = run_dir.join("best.ckpt");
    let mut history_file = HistoryWriter::create(&run_dir.join("history.csv"))?;
    log.line(&format!(
        "start: backbone={} scope={} input={}x{} train={} val={} seed={}",
        model.backbone_spec.id.key(),
        model.scope,
        model.backbone_spec.input_size.0,
        model.backbone_spec.input_size.1,
        train_set.len(),
        val_set.len(),
        config.seed
    ))?;

    let adam_cfg = config.adam();
    let mut head_state = AdamState::<f64>::new(model.head.slices().iter().map(|s| s.len()));
    let frozen = model.scope == TrainableScope::HeadOnly;
    let mut backbone_opt = (!frozen).then(|| BackboneOptimizer::new(model));
    let budget = config.feature_cache_mb.saturating_mul(1 << 20);
    // validation features are computed once; the rest of the budget goes to
    // augmented training views
    let mut val_cache = frozen.then(|| FeatureCache::new(budget));
    let mut train_cache = frozen.then(|| FeatureCache::new(budget));

    let mut stop = EarlyStopState::new(config.patience);
    let mut epochs = Vec::new();
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        order.sort_unstable();
        order.shuffle(&mut seed::rng_for_indexed(config.seed, role::SHUFFLE, &[epoch as u64]));
        let mut dropout_rng = seed::rng_for_indexed(config.seed, role::DROPOUT, &[epoch as u64]);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);

        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let draws: Vec<AugmentDraw> = batch
                .iter()
                .map(|&i| draw_augmentation(augment, &mut sample_rng(config.seed, epoch, i)))
                .collect();
            let batch_targets: Vec<usize> = batch.iter().map(|&i| train_targets[i]).collect();

            let (pooled, features) = if let Some(cache) = train_cache.as_mut() {
                let val_bytes = val_cache.as_ref().map_or(0, |c| c.bytes());
                cache.set_budget(budget.saturating_sub(val_bytes));
                (cache.pooled(model, train_set, batch, &draws, config.eval_batch_size)?, None)
            } else {
                let input = load_batch(train_set, batch, &draws, model)?;
                let features = model.backbone_features(&input, true)?;
                let f64_features = tensor_to_array4(&features)?;
                (model.pool(f64_features.view())?, Some((features, f64_features.dim())))
            };

            let (logits, cache) = model
                .head
                .forward(pooled.view(), model.head_spec.dropout_rate, Mode::Train(&mut dropout_rng))?;
            let out = cross_entropy_from_logits(logits.view(), &batch_targets, class_weights.as_deref())?;
            if !out.loss.is_finite() {
                log.line(&format!("abort: non-finite loss {} at epoch {epoch}, batch {}", out.loss, b + 1))?;
                return Err(Error::NonFinite { epoch, batch: b + 1, value: out.loss });
            }
            let (grads, input_grad) = model.head.backward(&cache, out.grad_logits.view(), features.is_some());
            {
                let grads = grads.slices();
                let mut params = model.head.slices_mut();
                adam_step(&mut params, &grads, &mut head_state, config.learning_rate, &adam_cfg)?;
            }
            if let (Some((features, dims)), Some(dpooled), Some(opt)) = (features, input_grad, backbone_opt.as_mut()) {
                let dfeatures = array4_to_tensor(&pool_backward(dpooled.view(), dims, &model.head_spec)?)?;
                opt.step(model, &features, &dfeatures, config.learning_rate, &adam_cfg)?;
            }

            loss_sum += out.per_sample.sum();
            correct += out.correct;
            seen += batch.len();
        }

        let (val_loss, val_accuracy, _) = evaluate_source(model, val_set, config.eval_batch_size, val_cache.as_mut())?;
        if !val_loss.is_finite() {
            log.line(&format!("abort: non-finite validation loss {val_loss} at epoch {epoch}"))?;
            return Err(Error::NonFinite { epoch, batch: 0, value: val_loss });
        }
        let metrics = EpochMetrics {
            epoch,
            train_loss: loss_sum / seen as f64,
            train_accuracy: correct as f64 / seen as f64,
            val_loss,
            val_accuracy,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        let decision = update_early_stop(stop, val_loss);
        stop = decision.state;
        if decision.should_checkpoint {
            save_checkpoint(model, &checkpoint_path)?;
            write_sidecar(
                &checkpoint_path,
                &CheckpointMeta {
                    epoch,
                    val_loss,
                    seed: config.seed,
                    backbone: model.backbone_spec.id.key().to_string(),
                },
            )?;
        }
        history_file.record(&metrics)?;
        log.line(&format!(
            "epoch {epoch}: train_loss={:.4} train_acc={:.4} val_loss={:.4} val_acc={:.4} {:.1}s{}",
            metrics.train_loss,
            metrics.train_accuracy,
            metrics.val_loss,
            metrics.val_accuracy,
            metrics.wall_seconds,
            if decision.should_checkpoint { " [checkpoint]" } else { "" }
        ))?;
        observer(&metrics);
        epochs.push(metrics);
        if decision.should_stop {
            stopped_early = true;
            log.line(&format!(
                "early stop after epoch {epoch}: no improvement for {} epochs",
                config.patience
            ))?;
            break;
        }
    }
    let history = TrainingHistory::from_epochs(epochs, stopped_early, checkpoint_path);
    log.line(&format!("done: best_epoch={} epochs={}", history.best_epoch, history.epochs.len()))?;
    Ok(history)
}
