//! Seeded fine-tuning of adapters and head with AdamW.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{make_batches, Batch, Dataset, Example, Split, Task};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::model::{ParamCount, TransformerModel};
use crate::numerics::{Element, Tape, Tensor};
use crate::tokenizer::ByteTokenizer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// `None` uses the task default (2 for detection, 4 for target).
    pub epochs: Option<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Decoupled decay, applied to the head only.
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm bound; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub class_weights: Option<Vec<f64>>,
    pub seed: u64,
    /// Extra validation every this many optimizer steps.
    pub eval_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: None,
            batch_size: 16,
            learning_rate: 3e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: Some(1.0),
            class_weights: None,
            seed: 0,
            eval_every: None,
        }
    }
}

impl TrainConfig {
    pub fn epochs_for(&self, task: Task) -> usize {
        self.epochs.unwrap_or_else(|| task.default_epochs())
    }

    pub fn hyper(&self) -> AdamHyper {
        AdamHyper {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self, n_classes: usize) -> Result<()> {
        if self.epochs == Some(0) {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("eps must be positive".into()));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        if self.eval_every == Some(0) {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        if let Some(w) = &self.class_weights {
            if w.len() != n_classes {
                return Err(Error::Config(format!(
                    "{} class weights for {n_classes} classes",
                    w.len()
                )));
            }
            if w.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
                return Err(Error::Config("class weights must be positive and finite".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moment estimates for one tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MomentState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// One AdamW update of `param` in place.
///
/// The moment estimates are bias-corrected. With `decay`, the parameter is
/// additionally shrunk by `lr · weight_decay · param`, independent of the
/// gradient.
pub fn optimizer_step<T: Element>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    state: &mut MomentState,
    hyper: &AdamHyper,
    decay: bool,
) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::Dimension(format!(
            "gradient shape {:?} does not match parameter {:?}",
            grad.shape(),
            param.shape()
        )));
    }
    if let Some(bad) = grad.data().iter().find(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient value {bad}")));
    }
    if state.m.is_empty() && state.step == 0 {
        state.m = vec![0.0; param.len()];
        state.v = vec![0.0; param.len()];
    } else if state.m.len() != param.len() {
        return Err(Error::Dimension("optimizer state does not match parameter".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    let wd = if decay { hyper.weight_decay } else { 0.0 };
    for (i, (p, g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
        let g = g.as_f64();
        let m = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * g;
        let v = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * g * g;
        state.m[i] = m;
        state.v[i] = v;
        let update = (m / c1) / ((v / c2).sqrt() + hyper.eps);
        let old = p.as_f64();
        *p = T::from_f64_lossy(old - hyper.lr * wd * old - hyper.lr * update);
    }
    Ok(())
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_grad_norm<T: Element>(grads: &mut [&mut Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let factor = T::from_f64_lossy(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v = *v * factor;
            }
        }
    }
    norm
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// The shuffled training batches used in `epoch` (0-based).
pub fn training_batches(
    train: &[&Example],
    tokenizer: &ByteTokenizer,
    config: &TrainConfig,
    epoch: usize,
) -> Result<Vec<Batch>> {
    make_batches(train, tokenizer, config.batch_size, true, epoch_seed(config.seed, epoch))
}

/// Mean (optionally class-weighted) cross-entropy of `model` on one batch.
pub fn batch_loss<T: Element>(
    model: &TransformerModel<T>,
    batch: &Batch,
    class_weights: Option<&[f64]>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let logits = model.forward_on_tape(&mut tape, &batch.tokens, false)?;
    let w: Option<Vec<T>> = class_weights.map(|w| w.iter().map(|&x| T::from_f64_lossy(x)).collect());
    let loss = tape.softmax_cross_entropy(logits, &batch.labels, w.as_deref())?;
    Ok(tape.value(loss).data()[0].as_f64())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub mean_loss: f64,
    pub validation: EvalReport,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepValidation {
    pub step: usize,
    pub accuracy: f64,
    pub weighted_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub config: TrainConfig,
    pub epochs_run: usize,
    pub step_losses: Vec<f64>,
    pub epochs: Vec<EpochRecord>,
    pub step_validations: Vec<StepValidation>,
    /// 1-based epoch whose adapters and head were kept.
    pub best_epoch: usize,
    pub params: ParamCount,
}

impl TrainHistory {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch - 1]
    }

    /// Copy with wall-clock fields zeroed, for run-to-run comparison.
    pub fn without_timing(&self) -> Self {
        let mut h = self.clone();
        for e in &mut h.epochs {
            e.seconds = 0.0;
        }
        h
    }

    /// `epoch,loss,accuracy,weighted_f1` with one row per epoch.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("epoch,loss,accuracy,weighted_f1\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{}\n",
                e.epoch,
                e.mean_loss,
                e.validation.accuracy(),
                e.validation.weighted_f1()
            ));
        }
        out
    }
}

fn snapshot<T: Element>(model: &TransformerModel<T>, names: &[String]) -> BTreeMap<String, Tensor<T>> {
    names
        .iter()
        .filter_map(|n| model.trainable_tensor(n).map(|t| (n.clone(), t.clone())))
        .collect()
}

fn non_finite(step: usize, batch: &Batch, loss: f64) -> Error {
    Error::NonFiniteLoss {
        step,
        loss,
        example_ids: batch.example_ids.clone(),
    }
}

/// Fine-tunes the trainable tensors of `model` (adapters and head) on the
/// training split.
///
/// Each epoch ends with a validation pass; the tensors from the epoch with
/// the highest weighted F1 (earliest on ties) are restored at the end. The
/// validation split is used when present, otherwise the training split.
pub fn train<T: Element>(
    model: &mut TransformerModel<T>,
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<TrainHistory> {
    let schema = dataset.schema();
    config.validate(schema.len())?;
    if model.config().n_classes != schema.len() {
        return Err(Error::Config(format!(
            "model has {} classes but the {} task has {}",
            model.config().n_classes,
            schema.task,
            schema.len()
        )));
    }
    let names = model.trainable_names();
    if names.is_empty() {
        return Err(Error::Config("model has no trainable tensors".into()));
    }
    let train_split = dataset.split(Split::Train);
    if train_split.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let mut valid_split = dataset.split(Split::Valid);
    if valid_split.is_empty() {
        log::warn!("validation split is empty; validating on the training split");
        valid_split = train_split.clone();
    }

    let epochs = config.epochs_for(schema.task);
    let hyper = config.hyper();
    let weights: Option<Vec<T>> = config
        .class_weights
        .as_ref()
        .map(|w| w.iter().map(|&x| T::from_f64_lossy(x)).collect());
    let tokenizer = model.tokenizer().clone();
    let mut state: BTreeMap<String, MomentState> = BTreeMap::new();
    let mut history = TrainHistory {
        config: config.clone(),
        epochs_run: epochs,
        step_losses: Vec::new(),
        epochs: Vec::new(),
        step_validations: Vec::new(),
        best_epoch: 1,
        params: model.count_params(),
    };
    let mut best: Option<(f64, BTreeMap<String, Tensor<T>>)> = None;
    let mut step = 0usize;

    for epoch in 0..epochs {
        let started = Instant::now();
        let batches = training_batches(&train_split, &tokenizer, config, epoch)?;
        let mut epoch_loss = 0.0;
        for batch in &batches {
            let mut tape = Tape::new();
            let loss = model
                .forward_on_tape(&mut tape, &batch.tokens, true)
                .and_then(|logits| tape.softmax_cross_entropy(logits, &batch.labels, weights.as_deref()))
                .map_err(|e| match e {
                    Error::Numeric(_) => non_finite(step, batch, f64::NAN),
                    other => other,
                })?;
            let loss_value = tape.value(loss).data()[0].as_f64();
            if !loss_value.is_finite() {
                return Err(non_finite(step, batch, loss_value));
            }
            let mut grads = tape.backward(loss)?.into_named();
            for name in &names {
                if !grads.contains_key(name) {
                    let shape = model
                        .trainable_tensor(name)
                        .ok_or_else(|| Error::State(format!("{name} vanished during training")))?
                        .shape()
                        .to_vec();
                    grads.insert(name.clone(), Tensor::zeros(shape));
                }
            }
            if let Some(max_norm) = config.grad_clip {
                let mut refs: Vec<&mut Tensor<T>> = grads.values_mut().collect();
                clip_grad_norm(&mut refs, max_norm);
            }
            for name in &names {
                let decay = model.is_decayable(name);
                let param = model.trainable_tensor_mut(name)?;
                optimizer_step(
                    param,
                    &grads[name],
                    state.entry(name.clone()).or_default(),
                    &hyper,
                    decay,
                )?;
            }
            history.step_losses.push(loss_value);
            epoch_loss += loss_value;
            step += 1;
            if config.eval_every.is_some_and(|n| step % n == 0) {
                let r = evaluate(model, &valid_split, schema, config.batch_size)?;
                history.step_validations.push(StepValidation {
                    step,
                    accuracy: r.accuracy(),
                    weighted_f1: r.weighted_f1(),
                });
            }
        }
        let validation = evaluate(model, &valid_split, schema, config.batch_size)?;
        let f1 = validation.weighted_f1();
        log::info!(
            "epoch {}/{epochs}: loss {:.4}, accuracy {:.4}, weighted F1 {:.4}",
            epoch + 1,
            epoch_loss / batches.len() as f64,
            validation.accuracy(),
            f1
        );
        if best.as_ref().is_none_or(|(b, _)| f1 > *b) {
            best = Some((f1, snapshot(model, &names)));
            history.best_epoch = epoch + 1;
        }
        history.epochs.push(EpochRecord {
            epoch: epoch + 1,
            mean_loss: epoch_loss / batches.len() as f64,
            validation,
            seconds: started.elapsed().as_secs_f64(),
        });
    }

    if let Some((_, tensors)) = best {
        for (name, t) in tensors {
            *model.trainable_tensor_mut(&name)? = t;
        }
    }
    Ok(history)
}
