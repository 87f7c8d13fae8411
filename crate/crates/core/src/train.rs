//! SGD with momentum, two-stage fine-tuning and evaluation.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{augment, center_crop, DataError, Dataset};
use crate::graph::{zoo::seeded, GraphError, ModelGraph};
use crate::seed::derive_seed;
use crate::tensor::{softmax_xent, Tensor, TensorError};

/// Samples per forward pass during evaluation.
pub const EVAL_BATCH: usize = 100;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training diverged in stage {stage}, epoch {epoch}: loss {loss}")]
    Diverged { stage: u8, epoch: usize, loss: f32 },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

/// Random crop and mirror applied to training batches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Augment {
    pub crop: usize,
    pub mirror: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Head-only stage.
    pub lr_stage1: f32,
    /// Whole-network stage.
    pub lr_stage2: f32,
    pub momentum: f32,
    pub batch_size: usize,
    /// Upper bound on epochs per stage.
    pub max_epochs: usize,
    /// Epochs without a validation-accuracy gain before a stage stops.
    pub patience: usize,
    pub seed: u64,
    pub augment: Option<Augment>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_stage1: 0.1,
            lr_stage2: 0.01,
            momentum: 0.9,
            batch_size: 32,
            max_epochs: 30,
            patience: 5,
            seed: 0,
            augment: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        for lr in [self.lr_stage1, self.lr_stage2] {
            if !(lr.is_finite() && lr >= 0.0) {
                return bad("learning rates must be finite and non-negative");
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if let Some(a) = self.augment {
            if a.crop == 0 {
                return bad("augment crop must be positive");
            }
        }
        Ok(())
    }
}

/// `v <- momentum * v - lr * g; w <- w + v`, element-wise.
pub fn sgd_step(params: &mut [f32], grads: &[f32], velocity: &mut [f32], lr: f32, momentum: f32) {
    for ((w, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v - lr * g;
        *w += *v;
    }
}

/// Which layers a stage updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    /// Parameterized layers after the last convolution.
    Head,
    All,
}

pub fn trainable_mask(graph: &ModelGraph, scope: Scope) -> Vec<bool> {
    let last_conv = graph.conv_layers().last().copied();
    graph
        .layers()
        .iter()
        .enumerate()
        .map(|(i, l)| {
            l.kind.has_params()
                && match scope {
                    Scope::All => true,
                    Scope::Head => last_conv.is_none_or(|c| i > c),
                }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: u8,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageResult {
    pub epochs: Vec<EpochRecord>,
    /// Validation accuracy of the returned snapshot.
    pub best_val: f64,
    /// Epoch of the snapshot; `None` when no epoch beat the starting weights.
    pub best_epoch: Option<usize>,
}

/// Model input batch for `graph` from dataset samples: center-cropped when the
/// dataset is larger than the model input.
fn fit_input(graph: &ModelGraph, batch: Tensor) -> Result<Tensor> {
    let [_, h, _] = graph.input_shape();
    if batch.shape()[2] == h {
        Ok(batch)
    } else {
        Ok(center_crop(&batch, h)?)
    }
}

/// Top-1 accuracy; a row's prediction is its first maximal logit.
pub fn evaluate(graph: &ModelGraph, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..dataset.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, labels) = dataset.batch(chunk);
        let logits = graph.forward(&fit_input(graph, x)?, false)?.logits;
        correct += predictions(&logits)
            .iter()
            .zip(&labels)
            .filter(|(p, l)| p == l)
            .count();
    }
    Ok(correct as f64 / dataset.len() as f64)
}

pub fn predictions(logits: &Tensor) -> Vec<usize> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

/// Train the `scope` layers with SGD until validation accuracy stops improving
/// for `patience` epochs, returning the best-validation snapshot.
#[allow(clippy::too_many_arguments)]
pub fn train_stage(
    graph: &ModelGraph,
    train: &Dataset,
    val: &Dataset,
    scope: Scope,
    lr: f32,
    stage: u8,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ModelGraph, StageResult)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let trainable = trainable_mask(graph, scope);
    let mut model = graph.clone();
    let mut velocity: Vec<Option<(Vec<f32>, Vec<f32>)>> = model
        .layers()
        .iter()
        .zip(&trainable)
        .map(|(l, &t)| {
            t.then(|| {
                (
                    vec![0.0; l.weights.as_ref().map_or(0, Tensor::len)],
                    vec![0.0; l.bias.as_ref().map_or(0, Tensor::len)],
                )
            })
        })
        .collect();
    let mut best = model.clone();
    let mut result = StageResult {
        best_val: evaluate(&model, val)?,
        ..Default::default()
    };
    let mut stale = 0usize;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.max_epochs {
        let epoch_seed = derive_seed(seed, epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut seeded(epoch_seed));
        let mut loss_sum = 0f64;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (mut x, labels) = train.batch(chunk);
            if let Some(a) = cfg.augment {
                x = augment(&x, a.crop, a.mirror, derive_seed(epoch_seed, bi as u64 + 1))?;
            }
            let x = fit_input(&model, x)?;
            let tape = model.forward_tape(&x)?;
            let (loss, grad) = softmax_xent(tape.logits(), &labels)?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged { stage, epoch, loss });
            }
            loss_sum += loss as f64 * chunk.len() as f64;
            let grads = model.backward(&tape, &grad, &trainable)?;
            for (i, g) in grads.into_iter().enumerate() {
                let (Some(g), Some((vw, vb))) = (g, velocity[i].as_mut()) else {
                    continue;
                };
                let (w, b) = model.params_mut(i).expect("trainable layer has params");
                sgd_step(w.data_mut(), g.weights.data(), vw, lr, cfg.momentum);
                sgd_step(b.data_mut(), g.bias.data(), vb, lr, cfg.momentum);
            }
        }
        let train_loss = loss_sum / train.len() as f64;
        if !train_loss.is_finite() || model.layers().iter().any(|l| l.weights.as_ref().is_some_and(|w| !w.all_finite())) {
            return Err(TrainError::Diverged {
                stage,
                epoch,
                loss: train_loss as f32,
            });
        }
        let val_acc = evaluate(&model, val)?;
        result.epochs.push(EpochRecord {
            stage,
            epoch,
            train_loss,
            val_acc,
        });
        if val_acc > result.best_val {
            result.best_val = val_acc;
            result.best_epoch = Some(epoch);
            best = model.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    Ok((best, result))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneHistory {
    pub initial_val: f64,
    pub stage1: StageResult,
    pub stage2: StageResult,
    pub conv_digest_before: String,
    pub conv_digest_after_stage1: String,
}

/// Stage 1 trains only the head with convolutions frozen; stage 2 trains everything.
/// Momentum buffers start from zero in each stage.
pub fn finetune_two_stage(
    graph: &ModelGraph,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
) -> Result<(ModelGraph, FinetuneHistory)> {
    let conv_digest_before = graph.conv_digest();
    let initial_val = evaluate(graph, val)?;
    let (g1, stage1) = train_stage(graph, train, val, Scope::Head, cfg.lr_stage1, 1, cfg, derive_seed(cfg.seed, 1))?;
    let conv_digest_after_stage1 = g1.conv_digest();
    let (g2, stage2) = train_stage(&g1, train, val, Scope::All, cfg.lr_stage2, 2, cfg, derive_seed(cfg.seed, 2))?;
    Ok((
        g2,
        FinetuneHistory {
            initial_val,
            stage1,
            stage2,
            conv_digest_before,
            conv_digest_after_stage1,
        },
    ))
}
