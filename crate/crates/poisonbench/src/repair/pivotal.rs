//! Pivotal tuning: regularized fine-tuning of a clone of the suspect model.
//!
//! The clone (the trainable model) minimizes
//! `CE + latent_weight * orthogonality + param_weight * ||pivot - model||_2`
//! over the trusted data: the task loss preserves clean behavior, the latent
//! term pushes class centroids and cross-model centroid directions toward
//! orthogonality, and the parameter term anchors the repaired model near the
//! frozen pivot.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::repair::{
    finetune_loop, latent::latent_orthogonality_with_grad, stratified_batch, BudgetProbes,
    LossParts, RepairConfig, RepairOutcome,
};
use crate::model::ModelHandle;
use crate::train::{accuracy, batch_loss_and_grad};

pub fn pivotal_tuning(
    pivot: &ModelHandle,
    trust: &LabeledSet,
    cfg: &RepairConfig,
    probes: &BudgetProbes,
) -> Result<RepairOutcome> {
    if trust.is_empty() {
        return Err(Error::EmptyInput("trusted set"));
    }
    // centroid terms need every class present
    let missing: Vec<usize> = (0..trust.class_count)
        .filter(|&c| trust.indices_with_label(c).is_empty())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingClasses(missing));
    }

    let pre_cda = accuracy(&probes.eval_images, &probes.eval_labels, pivot)?;
    let start = pivot.clone();
    let pivot_params = pivot.params.data.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let outcome = finetune_loop(start, pivot, cfg, probes, pre_cda, |model, optimizer, _step| {
        let batch = stratified_batch(trust, cfg.batch_size, &mut rng);
        let images: Vec<&Image> = batch.iter().map(|&i| &trust.images[i]).collect();
        let labels: Vec<usize> = batch.iter().map(|&i| trust.labels[i]).collect();

        let (task_loss, mut grads) = batch_loss_and_grad(model, &images, &labels)?;

        let mut latent_loss = 0.0;
        if cfg.latent_weight > 0.0 {
            let owned: Vec<Image> = images.iter().map(|&im| im.clone()).collect();
            let (l, latent_grads) =
                latent_orthogonality_with_grad(pivot, model, &owned, &labels)?;
            latent_loss = l;
            for (g, lg) in grads.iter_mut().zip(&latent_grads) {
                *g += cfg.latent_weight * lg;
            }
        }

        // parameter anchor: d||p - p̃||/dp = (p - p̃)/||p - p̃||, 0 at the pivot
        let mut dist_sq = 0.0;
        for (p, q) in model.params.data.iter().zip(&pivot_params) {
            dist_sq += (p - q) * (p - q);
        }
        let dist = dist_sq.sqrt();
        if cfg.param_weight > 0.0 && dist > 0.0 {
            for (g, (p, q)) in grads.iter_mut().zip(model.params.data.iter().zip(&pivot_params)) {
                *g += cfg.param_weight * (p - q) / dist;
            }
        }

        let lr = cfg.learning_rate;
        optimizer.step(&mut model.params.data, &grads, lr, None);
        Ok(LossParts {
            task: task_loss,
            latent: cfg.latent_weight * latent_loss,
            param: cfg.param_weight * dist,
        })
    })?;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic_dataset;
    use crate::model::ParamSet;
    use crate::repair::RepairMethod;
    use crate::train::{train, OptimizerKind, TrainConfig, TrainLength};

    fn small_cfg(steps: usize, latent_weight: f64, param_weight: f64) -> RepairConfig {
        RepairConfig {
            method: RepairMethod::Pivotal,
            steps,
            learning_rate: 0.01,
            optimizer: OptimizerKind::Sgd,
            momentum: 0.9,
            latent_weight,
            param_weight,
            weight_decay: 0.0,
            prune_rate: 0.0,
            teacher_steps: 0,
            attention_power: 2.0,
            attention_weight: 0.0,
            batch_size: 64,
            delta_budget: 1.0, // effectively unbounded for these unit tests
            eval_every: 10,
            seed: 3,
        }
    }

    fn stratified_indices(data: &LabeledSet, per_class: usize) -> Vec<usize> {
        let mut idx = Vec::new();
        for class in 0..data.class_count {
            idx.extend(data.indices_with_label(class).into_iter().take(per_class));
        }
        idx
    }

    fn fixture() -> (LabeledSet, ModelHandle, BudgetProbes) {
        let (data, _) = generate_synthetic_dataset(4, 30, 8, 6).unwrap();
        let train_cfg = TrainConfig {
            length: TrainLength::Steps(120),
            optimizer: OptimizerKind::Adam,
            learning_rate: 2e-3,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 32,
            schedule: crate::train::LrSchedule::Constant,
            seed: 1,
        };
        let model = train(&data, &train_cfg, None).unwrap();
        let probes = BudgetProbes {
            eval_images: data.images[..40].to_vec(),
            eval_labels: data.labels[..40].to_vec(),
            probe: None,
            true_probe: None,
        };
        (data, model, probes)
    }

    #[test]
    fn step_zero_record_has_pivot_loss_and_zero_distance() {
        let (data, model, probes) = fixture();
        let trust = data.subset(&stratified_indices(&data, 4));
        let outcome = pivotal_tuning(&model, &trust, &small_cfg(0, 0.05, 1.0), &probes).unwrap();
        let first = outcome.trace.records[0];
        assert_eq!(first.step, 0);
        assert_eq!(first.loss_param, 0.0);
        // zero steps: returned parameters equal the pivot
        assert_eq!(outcome.model.params.data, model.params.data);
    }

    #[test]
    fn param_anchor_keeps_model_closer() {
        // an undertrained model, so the task loss still pulls hard
        let (data, _) = generate_synthetic_dataset(4, 30, 8, 6).unwrap();
        let train_cfg = TrainConfig {
            length: TrainLength::Steps(20),
            optimizer: OptimizerKind::Adam,
            learning_rate: 2e-3,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 32,
            schedule: crate::train::LrSchedule::Constant,
            seed: 1,
        };
        let model = train(&data, &train_cfg, None).unwrap();
        let probes = BudgetProbes {
            eval_images: data.images[..40].to_vec(),
            eval_labels: data.labels[..40].to_vec(),
            probe: None,
            true_probe: None,
        };
        let trust = data.subset(&stratified_indices(&data, 4));
        let anchored = pivotal_tuning(&model, &trust, &small_cfg(60, 0.0, 0.5), &probes).unwrap();
        let free = pivotal_tuning(&model, &trust, &small_cfg(60, 0.0, 0.0), &probes).unwrap();
        let dist = |p: &ParamSet| p.l2_distance(&model.params);
        assert!(
            dist(&anchored.model.params) < dist(&free.model.params),
            "anchored {} vs free {}",
            dist(&anchored.model.params),
            dist(&free.model.params)
        );
    }

    #[test]
    fn missing_trust_class_is_rejected() {
        let (data, model, probes) = fixture();
        let only_class_zero = data.subset(&data.indices_with_label(0));
        assert!(pivotal_tuning(&model, &only_class_zero, &small_cfg(5, 0.05, 1.0), &probes).is_err());
    }
}
