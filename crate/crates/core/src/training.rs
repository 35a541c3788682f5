//! Two-stage training: segmentation pretraining, then classification
//! fine-tuning with a freshly initialized fusion head.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{bail, Result, SailError};
use crate::metrics::{classification_metrics, segmentation_scores, ClassificationReport};
use crate::model::{ForwardOptions, Param, ParamGroup, SailModel, Task};
use crate::synth::{stack_images, SyntheticScene};
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Images per inference call during validation.
const EVAL_BATCH: usize = 32;
const SHUFFLE_STREAM: u64 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Segmentation,
    Classification,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::lr_peak")]
    pub lr_peak: f64,
    #[serde(default = "defaults::weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "defaults::warmup_epochs")]
    pub warmup_epochs: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::lambda_ce")]
    pub lambda_ce: f64,
    #[serde(default)]
    pub seed: u64,
    pub stage: Stage,
}

mod defaults {
    pub fn epochs() -> usize {
        50
    }
    pub fn lr_peak() -> f64 {
        5e-4
    }
    pub fn weight_decay() -> f64 {
        0.05
    }
    pub fn warmup_epochs() -> usize {
        10
    }
    pub fn batch_size() -> usize {
        8
    }
    pub fn lambda_ce() -> f64 {
        1.0
    }
}

impl TrainConfig {
    pub fn new(stage: Stage) -> Self {
        TrainConfig {
            epochs: defaults::epochs(),
            lr_peak: defaults::lr_peak(),
            weight_decay: defaults::weight_decay(),
            warmup_epochs: defaults::warmup_epochs(),
            batch_size: defaults::batch_size(),
            lambda_ce: defaults::lambda_ce(),
            seed: 0,
            stage,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.warmup_epochs >= self.epochs {
            bail!(Config, "need 0 <= warmup_epochs < epochs, got {} and {}", self.warmup_epochs, self.epochs);
        }
        if !(self.lr_peak > 0.0) || !self.lr_peak.is_finite() {
            bail!(Config, "lr_peak must be positive");
        }
        if !(self.lambda_ce >= 0.0) || !(self.weight_decay >= 0.0) {
            bail!(Config, "lambda_ce and weight_decay must be non-negative");
        }
        if self.batch_size == 0 {
            bail!(Config, "batch_size must be at least 1");
        }
        Ok(())
    }
}

/// Epoch-start learning rate: linear warmup from 0, then half-cosine decay.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        bail!(Usage, "epoch {epoch} outside 0..{}", cfg.epochs);
    }
    let (e, w, n) = (epoch as f64, cfg.warmup_epochs as f64, cfg.epochs as f64);
    if epoch < cfg.warmup_epochs {
        return Ok(cfg.lr_peak * e / w);
    }
    Ok(cfg.lr_peak * 0.5 * (1.0 + (std::f64::consts::PI * (e - w) / (n - w)).cos()))
}

/// Adam moments for every parameter plus the shared step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Parameters the optimizer leaves untouched.
    pub frozen: Vec<bool>,
}

impl OptimizerState {
    pub fn new(params: &[Param], frozen: Vec<bool>) -> Result<Self> {
        if frozen.len() != params.len() {
            bail!(Dimension, "frozen mask has {} entries for {} parameters", frozen.len(), params.len());
        }
        Ok(OptimizerState {
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
            frozen,
        })
    }
}

/// One AdamW update with decoupled weight decay. Consumed gradients are
/// reset to zero.
pub fn adamw_step(
    params: &mut [Param],
    grads: &mut [Option<Vec<f64>>],
    state: &mut OptimizerState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        bail!(Usage, "optimizer state, gradients and parameters disagree in count");
    }
    for (i, p) in params.iter().enumerate() {
        if state.frozen[i] {
            continue;
        }
        match &grads[i] {
            None => bail!(Usage, "missing gradient for '{}'", p.name),
            Some(g) if g.len() != p.value.numel() || state.m[i].len() != g.len() => {
                bail!(Dimension, "gradient for '{}' has {} values, expected {}", p.name, g.len(), p.value.numel())
            }
            _ => {}
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (c1, c2) = (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t));
    for (i, p) in params.iter_mut().enumerate() {
        if state.frozen[i] {
            continue;
        }
        let g = grads[i].as_mut().expect("checked above");
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, theta) in p.value.data_mut().iter_mut().enumerate() {
            m[j] = BETA1 * m[j] + (1.0 - BETA1) * g[j];
            v[j] = BETA2 * v[j] + (1.0 - BETA2) * g[j] * g[j];
            *theta -= lr * weight_decay * *theta;
            *theta -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPS);
            g[j] = 0.0;
        }
    }
    Ok(())
}

/// `dice_loss + lambda * pixel cross-entropy` on channel probabilities.
pub fn seg_loss(tape: &mut Tape, probs: Var, labels: &[usize], lambda_ce: f64) -> Result<Var> {
    let dice = tape.dice_loss(probs, labels)?;
    if lambda_ce == 0.0 {
        return Ok(dice);
    }
    let ce = tape.pixel_nll(probs, labels)?;
    let ce = tape.affine(ce, lambda_ce, 0.0)?;
    tape.add(dice, ce)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Validation metrics in a fixed per-stage order.
    pub metrics: Vec<(&'static str, f64)>,
}

#[derive(Clone, Debug)]
pub struct TrainedCheckpoint {
    /// Parameters from the best validation epoch.
    pub model: SailModel,
    /// Optimizer state captured at the best epoch.
    pub optimizer: OptimizerState,
    pub stage: Stage,
    pub best_epoch: usize,
    pub history: Vec<EpochLog>,
    /// Stage II only: the backbone was not initialized from Stage I.
    pub from_scratch: bool,
}

/// Which parameters a stage updates. Stage II leaves the segmentation head
/// alone, as well as the decoder when the head never reads it.
pub fn frozen_mask(model: &SailModel, stage: Stage) -> Vec<bool> {
    let skip_decoder = !model.config().head_variant.uses_decoder();
    model
        .params()
        .iter()
        .map(|p| match stage {
            Stage::Segmentation => p.group == ParamGroup::Fusion,
            Stage::Classification => {
                p.group == ParamGroup::SegHead || (skip_decoder && p.name.starts_with("dec."))
            }
        })
        .collect()
}

fn refs(scenes: &[SyntheticScene]) -> Vec<&SyntheticScene> {
    scenes.iter().collect()
}

/// Pooled mean Dice and IoU of arg-max segmentation over `scenes`.
pub fn evaluate_segmentation(model: &SailModel, scenes: &[SyntheticScene]) -> Result<(f64, f64)> {
    let classes = model.config().num_seg_classes;
    let preds: Vec<Vec<usize>> = scenes
        .par_chunks(EVAL_BATCH)
        .map(|chunk| {
            let probs = model.segment(&stack_images(&refs(chunk))?)?;
            let (b, c, h, w) = probs.dims4()?;
            let hw = h * w;
            let d = probs.data();
            Ok((0..b * hw)
                .map(|i| {
                    let (bi, px) = (i / hw, i % hw);
                    (0..c).fold(0, |best, ci| {
                        if d[(bi * c + ci) * hw + px] > d[(bi * c + best) * hw + px] {
                            ci
                        } else {
                            best
                        }
                    })
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let truth: Vec<usize> = scenes.iter().flat_map(|s| s.mask.labels().iter().copied()).collect();
    segmentation_scores(&preds.concat(), &truth, classes)
}

/// Class probabilities `[n, K]` for `scenes`.
pub fn predict_probabilities(model: &SailModel, scenes: &[SyntheticScene]) -> Result<Tensor> {
    let parts: Vec<Tensor> = scenes
        .par_chunks(EVAL_BATCH)
        .map(|chunk| Ok(model.classify(&stack_images(&refs(chunk))?)?.1))
        .collect::<Result<_>>()?;
    let k = model.config().num_cls_classes;
    let data: Vec<f64> = parts.into_iter().flat_map(Tensor::into_data).collect();
    Tensor::new(vec![scenes.len(), k], data)
}

pub fn evaluate_classification(model: &SailModel, scenes: &[SyntheticScene]) -> Result<ClassificationReport> {
    let probs = predict_probabilities(model, scenes)?;
    let labels: Vec<usize> = scenes.iter().map(|s| s.label).collect();
    classification_metrics(&probs, &labels)
}

fn check_finite(loss: f64, epoch: usize, step: usize) -> Result<()> {
    if !loss.is_finite() {
        return Err(SailError::NonFinite(format!("loss {loss} at epoch {epoch}, step {step}")));
    }
    Ok(())
}

/// Runs the shared epoch loop; `step_loss` records one batch on the tape and
/// returns the scalar loss, `validate` scores the current model and returns
/// `(metrics, selection key)`.
fn train_loop(
    mut model: SailModel,
    train: &[SyntheticScene],
    cfg: &TrainConfig,
    frozen: Vec<bool>,
    step_loss: impl Fn(&SailModel, &mut Tape, &[&SyntheticScene]) -> Result<(Var, Vec<Var>)>,
    validate: impl Fn(&SailModel) -> Result<(Vec<(&'static str, f64)>, Vec<f64>)>,
) -> Result<(SailModel, OptimizerState, usize, Vec<EpochLog>)> {
    cfg.validate()?;
    if train.is_empty() {
        bail!(Input, "empty training set");
    }
    let mut state = OptimizerState::new(model.params(), frozen)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(Vec<f64>, SailModel, OptimizerState, usize)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg)?;
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&SyntheticScene> = idx.iter().map(|&i| &train[i]).collect();
            let mut tape = Tape::new();
            let (loss, params) = step_loss(&model, &mut tape, &batch)?;
            let value = tape.value(loss).data()[0];
            check_finite(value, epoch, step)?;
            tape.backward(loss)?;
            let mut grads: Vec<Option<Vec<f64>>> = params.iter().map(|&p| tape.take_grad(p)).collect();
            adamw_step(model.params_mut(), &mut grads, &mut state, lr, cfg.weight_decay)?;
            loss_sum += value;
            batches += 1;
        }
        let (metrics, key) = validate(&model)?;
        history.push(EpochLog {
            epoch,
            lr,
            train_loss: loss_sum / batches as f64,
            metrics,
        });
        let improved = match &best {
            None => true,
            Some((k, ..)) => key.iter().zip(k).find(|(a, b)| a != b).is_some_and(|(a, b)| a > b),
        };
        if improved {
            best = Some((key, model.clone(), state.clone(), epoch));
        }
    }
    let (_, model, state, best_epoch) = best.expect("at least one epoch");
    Ok((model, state, best_epoch, history))
}

/// Stage I: trains encoder, decoder and segmentation head on
/// `Dice + lambda * CE`; keeps the epoch with the best validation Dice.
pub fn pretrain_segmentation(
    model: SailModel,
    train: &[SyntheticScene],
    val: &[SyntheticScene],
    cfg: &TrainConfig,
) -> Result<TrainedCheckpoint> {
    if cfg.stage != Stage::Segmentation {
        bail!(Config, "pretraining needs stage = segmentation");
    }
    if val.is_empty() {
        bail!(Input, "empty validation set");
    }
    let frozen = frozen_mask(&model, Stage::Segmentation);
    let lambda = cfg.lambda_ce;
    let (model, optimizer, best_epoch, history) = train_loop(
        model,
        train,
        cfg,
        frozen,
        |m, tape, batch| {
            let images = stack_images(batch)?;
            let labels: Vec<usize> = batch.iter().flat_map(|s| s.mask.labels().iter().copied()).collect();
            let opts = ForwardOptions {
                param_grads: true,
                ..Default::default()
            };
            let f = m.forward(tape, &images, Task::Segment, opts)?;
            let loss = seg_loss(tape, f.seg_probs.expect("segment task"), &labels, lambda)?;
            Ok((loss, f.params))
        },
        |m| {
            let (dice, iou) = evaluate_segmentation(m, val)?;
            Ok((vec![("val_dice", dice), ("val_iou", iou)], vec![dice]))
        },
    )?;
    Ok(TrainedCheckpoint {
        model,
        optimizer,
        stage: Stage::Segmentation,
        best_epoch,
        history,
        from_scratch: false,
    })
}

/// Stage II: copies backbone and segmentation head from `init` (unless
/// `None`, which trains from the random initialization of `model`), keeps
/// the fresh fusion head of `model`, and trains on cross-entropy. The best
/// epoch maximizes validation `(F1, AUROC, kappa)` lexicographically.
pub fn finetune_classification(
    mut model: SailModel,
    init: Option<&SailModel>,
    train: &[SyntheticScene],
    val: &[SyntheticScene],
    cfg: &TrainConfig,
) -> Result<TrainedCheckpoint> {
    if cfg.stage != Stage::Classification {
        bail!(Config, "fine-tuning needs stage = classification");
    }
    if val.is_empty() {
        bail!(Input, "empty validation set");
    }
    if let Some(src) = init {
        model.load_backbone_from(src)?;
    }
    let frozen = frozen_mask(&model, Stage::Classification);
    let (model, optimizer, best_epoch, history) = train_loop(
        model,
        train,
        cfg,
        frozen,
        |m, tape, batch| {
            let images = stack_images(batch)?;
            let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
            let opts = ForwardOptions {
                param_grads: true,
                ..Default::default()
            };
            let f = m.forward(tape, &images, Task::Classify, opts)?;
            let loss = tape.cross_entropy(f.logits.expect("classify task"), &labels)?;
            Ok((loss, f.params))
        },
        |m| {
            let r = evaluate_classification(m, val)?;
            let mut metrics = vec![
                ("val_f1", r.f1),
                ("val_auroc", r.auroc),
                ("val_kappa", r.kappa),
                ("val_accuracy", r.accuracy),
            ];
            if let Some(a) = m.alpha() {
                metrics.push(("alpha", a));
            }
            Ok((metrics, vec![r.f1, r.auroc, r.kappa]))
        },
    )?;
    Ok(TrainedCheckpoint {
        model,
        optimizer,
        stage: Stage::Classification,
        best_epoch,
        history,
        from_scratch: init.is_none(),
    })
}
