//! Baseline repair methods: weight-decay fine-tuning, fine-pruning,
//! attention distillation, and the trigger-based repair branch of the
//! trigger-reversal detector.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attack::Trigger;
use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::exec;
use crate::image::Image;
use crate::model::{cross_entropy_with_grad, BackwardRequest, ForwardCache, ModelHandle};
use crate::repair::{
    finetune_loop, stratified_batch, BudgetProbes, LossParts, RepairConfig, RepairOutcome,
};
use crate::train::{accuracy, batch_loss_and_grad, Optimizer};

/// Fine-tuning with an explicit `weight_decay * sum(w^2)` penalty.
pub fn weight_decay_finetune(
    pivot: &ModelHandle,
    trust: &LabeledSet,
    cfg: &RepairConfig,
    probes: &BudgetProbes,
) -> Result<RepairOutcome> {
    if trust.is_empty() {
        return Err(Error::EmptyInput("trusted set"));
    }
    let pre_cda = accuracy(&probes.eval_images, &probes.eval_labels, pivot)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    finetune_loop(pivot.clone(), pivot, cfg, probes, pre_cda, |model, optimizer, _step| {
        let batch = stratified_batch(trust, cfg.batch_size, &mut rng);
        let images: Vec<&Image> = batch.iter().map(|&i| &trust.images[i]).collect();
        let labels: Vec<usize> = batch.iter().map(|&i| trust.labels[i]).collect();
        let (task_loss, mut grads) = batch_loss_and_grad(model, &images, &labels)?;
        let mut penalty = 0.0;
        if cfg.weight_decay > 0.0 {
            for (g, p) in grads.iter_mut().zip(&model.params.data) {
                penalty += p * p;
                *g += 2.0 * cfg.weight_decay * p;
            }
        }
        optimizer.step(&mut model.params.data, &grads, cfg.learning_rate, None);
        Ok(LossParts { task: task_loss, latent: 0.0, param: cfg.weight_decay * penalty })
    })
}

/// Indices (into a flat channel list) of the lowest-activation channels to
/// reset: the `floor(rate * n)` channels with the smallest mean absolute
/// activation, ties broken by channel index.
pub fn select_prune_channels(mean_activations: &[f64], rate: f64) -> Vec<usize> {
    let n = mean_activations.len();
    let count = (rate * n as f64).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        mean_activations[a]
            .partial_cmp(&mean_activations[b])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut selected: Vec<usize> = order.into_iter().take(count).collect();
    selected.sort_unstable();
    selected
}

/// Mean absolute post-activation value of every conv channel over a set of
/// images, flattened block by block.
pub fn channel_mean_activations(model: &ModelHandle, images: &[Image]) -> Result<Vec<f64>> {
    if images.is_empty() {
        return Err(Error::EmptyInput("activation probe"));
    }
    let caches = {
        let caches = exec::map(images, |im| model.forward_cached(im));
        caches.into_iter().collect::<Result<Vec<ForwardCache>>>()?
    };
    let mut means = Vec::new();
    for (block, &channels) in model.arch.conv_channels.iter().enumerate() {
        let spatial = model.arch.spatial(block);
        let plane = spatial * spatial;
        for ch in 0..channels {
            let mut acc = 0.0;
            for cache in &caches {
                let feat = &cache.features[block][ch * plane..(ch + 1) * plane];
                acc += feat.iter().map(|v| v.abs()).sum::<f64>();
            }
            means.push(acc / (plane * caches.len()) as f64);
        }
    }
    Ok(means)
}

/// Zero the conv filter and bias producing each selected channel.
fn reset_channels(model: &mut ModelHandle, selected: &[usize]) {
    let mut base = 0;
    for (block, &channels) in model.arch.conv_channels.iter().enumerate().collect::<Vec<_>>() {
        let c_in = if block == 0 { model.arch.in_channels } else { model.arch.conv_channels[block - 1] };
        let w_entry = model
            .params
            .layout
            .entries
            .iter()
            .find(|e| e.name == format!("conv{block}.w"))
            .unwrap()
            .clone();
        let b_entry = model
            .params
            .layout
            .entries
            .iter()
            .find(|e| e.name == format!("conv{block}.b"))
            .unwrap()
            .clone();
        for &global in selected {
            if global >= base && global < base + channels {
                let ch = global - base;
                let start = w_entry.offset + ch * c_in * 9;
                for v in &mut model.params.data[start..start + c_in * 9] {
                    *v = 0.0;
                }
                model.params.data[b_entry.offset + ch] = 0.0;
            }
        }
        base += channels;
    }
}

/// Fine-pruning: reset the lowest-activation channels, then plain fine-tune
/// under the accuracy budget.
pub fn fine_prune(
    pivot: &ModelHandle,
    trust: &LabeledSet,
    cfg: &RepairConfig,
    probes: &BudgetProbes,
) -> Result<RepairOutcome> {
    if trust.is_empty() {
        return Err(Error::EmptyInput("trusted set"));
    }
    let pre_cda = accuracy(&probes.eval_images, &probes.eval_labels, pivot)?;
    let means = channel_mean_activations(pivot, &trust.images)?;
    let selected = select_prune_channels(&means, cfg.prune_rate);
    let mut pruned = pivot.clone();
    reset_channels(&mut pruned, &selected);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    finetune_loop(pruned, pivot, cfg, probes, pre_cda, |model, optimizer, _step| {
        let batch = stratified_batch(trust, cfg.batch_size, &mut rng);
        let images: Vec<&Image> = batch.iter().map(|&i| &trust.images[i]).collect();
        let labels: Vec<usize> = batch.iter().map(|&i| trust.labels[i]).collect();
        let (task_loss, grads) = batch_loss_and_grad(model, &images, &labels)?;
        optimizer.step(&mut model.params.data, &grads, cfg.learning_rate, None);
        Ok(LossParts { task: task_loss, ..Default::default() })
    })
}

/// Spatial attention map of one feature block: the channel sum of `|F|^p`,
/// L2-normalized over the spatial plane. All-zero blocks map to all-zero.
pub fn attention_map(features: &[f64], channels: usize, plane: usize, power: f64) -> Vec<f64> {
    let mut map = vec![0.0; plane];
    for ch in 0..channels {
        for (m, v) in map.iter_mut().zip(&features[ch * plane..(ch + 1) * plane]) {
            *m += v.abs().powf(power);
        }
    }
    let norm = map.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for m in &mut map {
            *m /= norm;
        }
    }
    map
}

/// Attention alignment between a student block and a teacher block:
/// `||A_s - A_t||_2` plus the gradient with respect to the student features.
fn attention_alignment_grad(
    student_features: &[f64],
    teacher_map: &[f64],
    channels: usize,
    plane: usize,
    power: f64,
) -> (f64, Vec<f64>) {
    // unnormalized map m and its norm
    let mut m = vec![0.0; plane];
    for ch in 0..channels {
        for (mv, v) in m.iter_mut().zip(&student_features[ch * plane..(ch + 1) * plane]) {
            *mv += v.abs().powf(power);
        }
    }
    let norm = m.iter().map(|v| v * v).sum::<f64>().sqrt();
    let a: Vec<f64> = if norm > 0.0 { m.iter().map(|v| v / norm).collect() } else { m.clone() };

    let diff: Vec<f64> = a.iter().zip(teacher_map).map(|(s, t)| s - t).collect();
    let loss = diff.iter().map(|d| d * d).sum::<f64>().sqrt();
    if loss == 0.0 || norm == 0.0 {
        return (loss, vec![0.0; channels * plane]);
    }

    // dL/dA = diff / loss; dA_i/dm_j = δ_ij/norm - m_i m_j / norm^3
    let g_a: Vec<f64> = diff.iter().map(|d| d / loss).collect();
    let dot_ga_m: f64 = g_a.iter().zip(&m).map(|(g, mv)| g * mv).sum();
    let g_m: Vec<f64> = g_a
        .iter()
        .zip(&m)
        .map(|(g, mv)| g / norm - mv * dot_ga_m / (norm * norm * norm))
        .collect();

    // dm/dF = p |F|^{p-1} sign(F)
    let mut g_f = vec![0.0; channels * plane];
    for ch in 0..channels {
        for i in 0..plane {
            let f = student_features[ch * plane + i];
            if f != 0.0 {
                g_f[ch * plane + i] = g_m[i] * power * f.abs().powf(power - 1.0) * f.signum();
            }
        }
    }
    (loss, g_f)
}

/// Attention distillation: fine-tune a teacher clone on trusted data, then
/// fine-tune the student with CE plus per-block attention alignment against
/// the teacher.
pub fn nad(
    pivot: &ModelHandle,
    trust: &LabeledSet,
    cfg: &RepairConfig,
    probes: &BudgetProbes,
) -> Result<RepairOutcome> {
    if trust.is_empty() {
        return Err(Error::EmptyInput("trusted set"));
    }
    let pre_cda = accuracy(&probes.eval_images, &probes.eval_labels, pivot)?;

    // teacher: clone of the suspect model fine-tuned on trusted data
    let mut teacher = pivot.clone();
    {
        let mut rng = ChaCha8Rng::seed_from_u64(crate::seed::derive(cfg.seed, "nad-teacher"));
        let mut optimizer =
            Optimizer::new(cfg.optimizer, cfg.momentum, 0.0, teacher.param_count());
        for _ in 0..cfg.teacher_steps {
            let batch = stratified_batch(trust, cfg.batch_size, &mut rng);
            let images: Vec<&Image> = batch.iter().map(|&i| &trust.images[i]).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| trust.labels[i]).collect();
            let (loss, grads) = batch_loss_and_grad(&teacher, &images, &labels)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { step: 0, loss });
            }
            optimizer.step(&mut teacher.params.data, &grads, cfg.learning_rate, None);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let blocks = pivot.arch.block_count();
    finetune_loop(pivot.clone(), pivot, cfg, probes, pre_cda, |model, optimizer, _step| {
        let batch = stratified_batch(trust, cfg.batch_size, &mut rng);
        let scale = 1.0 / batch.len() as f64;

        let per_sample = exec::map(&batch, |&idx| {
            let image = &trust.images[idx];
            let label = trust.labels[idx];
            let student_cache = model.forward_cached(image)?;
            let teacher_cache = teacher.forward_cached(image)?;
            let (ce, grad_logits) = cross_entropy_with_grad(&student_cache.logits, label);

            let mut attention_loss = 0.0;
            let mut feature_grads: Vec<Option<Vec<f64>>> = vec![None; blocks];
            if cfg.attention_weight > 0.0 {
                for b in 0..blocks {
                    let channels = model.arch.conv_channels[b];
                    let spatial = model.arch.spatial(b);
                    let plane = spatial * spatial;
                    let teacher_map = attention_map(
                        &teacher_cache.features[b],
                        channels,
                        plane,
                        cfg.attention_power,
                    );
                    let (l, mut g) = attention_alignment_grad(
                        &student_cache.features[b],
                        &teacher_map,
                        channels,
                        plane,
                        cfg.attention_power,
                    );
                    attention_loss += l;
                    for gv in &mut g {
                        *gv *= cfg.attention_weight;
                    }
                    feature_grads[b] = Some(g);
                }
            }
            let back = model.backward(
                &student_cache,
                &BackwardRequest {
                    grad_logits: Some(grad_logits),
                    grad_features: if cfg.attention_weight > 0.0 { Some(feature_grads) } else { None },
                    ..Default::default()
                },
            );
            Ok::<_, Error>((ce, attention_loss, back.param_grads))
        });

        let mut task = 0.0;
        let mut attention = 0.0;
        let mut grads = vec![0.0; model.param_count()];
        for r in per_sample {
            let (ce, at, g) = r?;
            task += ce;
            attention += at;
            for (acc, v) in grads.iter_mut().zip(&g) {
                *acc += v;
            }
        }
        task *= scale;
        attention *= scale;
        for g in &mut grads {
            *g *= scale;
        }
        optimizer.step(&mut model.params.data, &grads, cfg.learning_rate, None);
        Ok(LossParts { task, latent: cfg.attention_weight * attention, param: 0.0 })
    })
}

/// Repair with a reverse-engineered trigger: alternate batches of
/// trigger-stamped images with their ground-truth labels (even steps,
/// zero-based) and clean batches (odd steps).
pub fn nc_repair(
    pivot: &ModelHandle,
    trust: &LabeledSet,
    reversed_trigger: &Trigger,
    cfg: &RepairConfig,
    probes: &BudgetProbes,
) -> Result<RepairOutcome> {
    if trust.is_empty() {
        return Err(Error::EmptyInput("trusted set"));
    }
    let pre_cda = accuracy(&probes.eval_images, &probes.eval_labels, pivot)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    finetune_loop(pivot.clone(), pivot, cfg, probes, pre_cda, |model, optimizer, step| {
        let batch = stratified_batch(trust, cfg.batch_size, &mut rng);
        let labels: Vec<usize> = batch.iter().map(|&i| trust.labels[i]).collect();
        let triggered_step = step % 2 == 0;
        let images: Vec<Image> = if triggered_step {
            batch
                .iter()
                .map(|&i| reversed_trigger.apply(&trust.images[i]))
                .collect::<Result<_>>()?
        } else {
            batch.iter().map(|&i| trust.images[i].clone()).collect()
        };
        let refs: Vec<&Image> = images.iter().collect();
        let (task_loss, grads) = batch_loss_and_grad(model, &refs, &labels)?;
        optimizer.step(&mut model.params.data, &grads, cfg.learning_rate, None);
        Ok(LossParts { task: task_loss, ..Default::default() })
    })
}
