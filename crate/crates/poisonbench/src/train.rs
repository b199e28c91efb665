//! Stochastic training of the tiny classifier, plus accuracy evaluation.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledSet, Oracle};
use crate::error::{Error, Result};
use crate::exec;
use crate::image::Image;
use crate::model::{cross_entropy_with_grad, Architecture, BackwardRequest, ModelHandle};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainLength {
    Steps(usize),
    Epochs(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    /// Plain SGD with momentum.
    Sgd,
    /// Adaptive moment estimation.
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant,
    /// Cosine annealing over the whole run.
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub length: TrainLength,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::InvalidArg("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArg("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn steps_for(&self, dataset_len: usize) -> usize {
        match self.length {
            TrainLength::Steps(n) => n,
            TrainLength::Epochs(e) => e * dataset_len.div_ceil(self.batch_size),
        }
    }
}

/// Optimizer state shared by the trainer and the repair loops. A parameter
/// mask restricts updates (and moment-state updates) to the flagged entries.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<f64>,
    adam_m: Vec<f64>,
    adam_v: Vec<f64>,
    t: u64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, momentum: f64, weight_decay: f64, dim: usize) -> Self {
        let (velocity, adam_m, adam_v) = match kind {
            OptimizerKind::Sgd => (vec![0.0; dim], Vec::new(), Vec::new()),
            OptimizerKind::Adam => (Vec::new(), vec![0.0; dim], vec![0.0; dim]),
        };
        Self { kind, momentum, weight_decay, velocity, adam_m, adam_v, t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, mask: Option<&[bool]>) {
        let active = |i: usize| mask.map_or(true, |m| m[i]);
        match self.kind {
            OptimizerKind::Sgd => {
                for i in 0..params.len() {
                    if !active(i) {
                        continue;
                    }
                    let g = grads[i] + self.weight_decay * params[i];
                    self.velocity[i] = self.momentum * self.velocity[i] + g;
                    params[i] -= lr * self.velocity[i];
                }
            }
            OptimizerKind::Adam => {
                self.t += 1;
                let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
                let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
                for i in 0..params.len() {
                    if !active(i) {
                        continue;
                    }
                    let g = grads[i] + self.weight_decay * params[i];
                    self.adam_m[i] = ADAM_BETA1 * self.adam_m[i] + (1.0 - ADAM_BETA1) * g;
                    self.adam_v[i] = ADAM_BETA2 * self.adam_v[i] + (1.0 - ADAM_BETA2) * g * g;
                    let m_hat = self.adam_m[i] / bc1;
                    let v_hat = self.adam_v[i] / bc2;
                    params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

pub fn schedule_lr(schedule: LrSchedule, base: f64, step: usize, total_steps: usize) -> f64 {
    match schedule {
        LrSchedule::Constant => base,
        LrSchedule::Cosine => {
            if total_steps == 0 {
                return base;
            }
            let frac = step.min(total_steps) as f64 / total_steps as f64;
            base * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
        }
    }
}

/// Mean cross-entropy and mean parameter gradient over a batch.
///
/// Per-sample work fans out over the execution helpers; the reduction is a
/// fixed-order sum, so results are bit-identical for any thread count.
pub fn batch_loss_and_grad(
    model: &ModelHandle,
    images: &[&Image],
    labels: &[usize],
) -> Result<(f64, Vec<f64>)> {
    if images.is_empty() {
        return Err(Error::EmptyInput("batch"));
    }
    let per_sample = exec::map_indices(images.len(), |i| {
        let cache = model.forward_cached(images[i])?;
        let (loss, grad_logits) = cross_entropy_with_grad(&cache.logits, labels[i]);
        let back = model.backward(
            &cache,
            &BackwardRequest { grad_logits: Some(grad_logits), ..Default::default() },
        );
        Ok::<_, Error>((loss, back.param_grads))
    });

    let scale = 1.0 / images.len() as f64;
    let mut total_loss = 0.0;
    let mut grads = vec![0.0; model.param_count()];
    for r in per_sample {
        let (loss, g) = r?;
        total_loss += loss;
        for (acc, v) in grads.iter_mut().zip(&g) {
            *acc += v;
        }
    }
    for g in &mut grads {
        *g *= scale;
    }
    Ok((total_loss * scale, grads))
}

/// Train a model on a labeled set. When `init` is given, training continues
/// from those parameters (the architectures must match); otherwise a fresh
/// model is initialized from a seed derived from `cfg.seed`.
pub fn train(data: &LabeledSet, cfg: &TrainConfig, init: Option<&ModelHandle>) -> Result<ModelHandle> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput("training set"));
    }

    let mut model = match init {
        Some(m) => {
            let img = &data.images[0];
            if m.arch.in_channels != img.c || m.arch.image_size != img.h {
                return Err(Error::ArchMismatch {
                    expected: m.arch.id.clone(),
                    found: format!("data with {}", img.shape_string()),
                });
            }
            m.clone()
        }
        None => {
            let img = &data.images[0];
            let arch = Architecture::tiny(img.c, img.h, data.class_count)?;
            ModelHandle::init(arch, seed::derive(cfg.seed, seed::domain::INIT))
        }
    };
    model.meta.train_seeds.push(cfg.seed);

    let total_steps = cfg.steps_for(data.len());
    if total_steps == 0 {
        return Ok(model);
    }

    let mut optimizer =
        Optimizer::new(cfg.optimizer, cfg.momentum, cfg.weight_decay, model.param_count());
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, seed::domain::TRAIN));
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;
    let mask = model.trainable_mask.clone();

    for step in 0..total_steps {
        let mut batch_idx = Vec::with_capacity(cfg.batch_size.min(data.len()));
        for _ in 0..cfg.batch_size.min(data.len()) {
            if cursor >= order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch_idx.push(order[cursor]);
            cursor += 1;
        }
        let images: Vec<&Image> = batch_idx.iter().map(|&i| &data.images[i]).collect();
        let labels: Vec<usize> = batch_idx.iter().map(|&i| data.labels[i]).collect();

        let (loss, grads) = batch_loss_and_grad(&model, &images, &labels)?;
        let grad_norm_sq: f64 = grads.iter().map(|g| g * g).sum();
        if !loss.is_finite() || !grad_norm_sq.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        let lr = schedule_lr(cfg.schedule, cfg.learning_rate, step, total_steps);
        optimizer.step(&mut model.params.data, &grads, lr, mask.as_deref());
    }
    Ok(model)
}

/// Anything that can assign a class to an image: a trained model (argmax
/// prediction) or the ground-truth oracle.
pub trait Labeler {
    fn label(&self, image: &Image) -> Result<usize>;
}

impl Labeler for ModelHandle {
    fn label(&self, image: &Image) -> Result<usize> {
        self.predict(image)
    }
}

impl Labeler for Oracle {
    fn label(&self, image: &Image) -> Result<usize> {
        self.label_of(image)
    }
}

/// Exact fraction of images whose assigned label matches `labels`.
pub fn accuracy<L: Labeler + Sync>(images: &[Image], labels: &[usize], labeler: &L) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::EmptyInput("accuracy evaluation"));
    }
    if images.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} labels", images.len()),
            got: format!("{}", labels.len()),
        });
    }
    let hits = exec::map_indices(images.len(), |i| {
        labeler.label(&images[i]).map(|p| usize::from(p == labels[i]))
    });
    let mut correct = 0usize;
    for h in hits {
        correct += h?;
    }
    Ok(correct as f64 / images.len() as f64)
}

/// Accuracy of a model on a labeled set.
pub fn accuracy_on(set: &LabeledSet, model: &ModelHandle) -> Result<f64> {
    accuracy(&set.images, &set.labels, model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic_dataset;

    fn quick_cfg(steps: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            length: TrainLength::Steps(steps),
            optimizer: OptimizerKind::Adam,
            learning_rate: 2e-3,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 16,
            schedule: LrSchedule::Constant,
            seed,
        }
    }

    #[test]
    fn zero_steps_returns_init_unchanged() {
        let (data, _) = generate_synthetic_dataset(4, 10, 8, 0).unwrap();
        let init = ModelHandle::init(Architecture::tiny(3, 8, 4).unwrap(), 5);
        let out = train(&data, &quick_cfg(0, 1), Some(&init)).unwrap();
        assert_eq!(out.params.data, init.params.data);
    }

    #[test]
    fn training_is_deterministic() {
        let (data, _) = generate_synthetic_dataset(3, 12, 8, 2).unwrap();
        let a = train(&data, &quick_cfg(25, 9), None).unwrap();
        let b = train(&data, &quick_cfg(25, 9), None).unwrap();
        assert_eq!(a.params.data, b.params.data);
    }

    #[test]
    fn accuracy_against_own_predictions_is_one() {
        let (data, _) = generate_synthetic_dataset(3, 4, 8, 3).unwrap();
        let model = train(&data, &quick_cfg(5, 3), None).unwrap();
        let preds = model.predict_batch(&data.images).unwrap();
        assert_eq!(accuracy(&data.images, &preds, &model).unwrap(), 1.0);
        let shifted: Vec<usize> = preds.iter().map(|p| (p + 1) % 3).collect();
        assert_eq!(accuracy(&data.images, &shifted, &model).unwrap(), 0.0);
    }

    #[test]
    fn accuracy_rejects_empty_input() {
        let (data, _) = generate_synthetic_dataset(3, 4, 8, 3).unwrap();
        let model = train(&data, &quick_cfg(1, 3), None).unwrap();
        assert!(accuracy(&[], &[], &model).is_err());
    }

    #[test]
    fn cosine_schedule_decays_to_zero() {
        let start = schedule_lr(LrSchedule::Cosine, 0.1, 0, 100);
        let end = schedule_lr(LrSchedule::Cosine, 0.1, 100, 100);
        assert!((start - 0.1).abs() < 1e-12);
        assert!(end.abs() < 1e-12);
    }

    #[test]
    fn arch_mismatch_on_wrong_init() {
        let (data, _) = generate_synthetic_dataset(3, 4, 8, 3).unwrap();
        let wrong = ModelHandle::init(Architecture::tiny(3, 16, 3).unwrap(), 0);
        assert!(train(&data, &quick_cfg(1, 0), Some(&wrong)).is_err());
    }
}
