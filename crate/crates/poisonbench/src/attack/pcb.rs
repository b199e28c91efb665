//! Parameter-controlled backdoor: a code-poisoning attack that confines the
//! backdoor to a randomly sampled subset of the model's parameters.
//!
//! The attacker owns the whole training loop. Even iterations update only the
//! sampled parameter subset on a triggered sample with the target label; odd
//! iterations update all parameters on a clean sample with its true label.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::attack::trigger::Trigger;
use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::model::{cross_entropy_with_grad, BackwardRequest, ModelHandle};
use crate::seed;
use crate::train::{Optimizer, OptimizerKind};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PcbConfig {
    pub target_class: usize,
    /// Fraction of parameters carrying the backdoor, in (0, 1].
    pub param_fraction: f64,
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

/// Sample the poisoned parameter subset: uniform over all entries (biases
/// included), without replacement.
pub fn sample_param_subset(param_count: usize, fraction: f64, seed: u64) -> Result<Vec<bool>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArg(format!("param fraction {fraction} outside (0,1]")));
    }
    let count = ((param_count as f64 * fraction).round() as usize).clamp(1, param_count);
    let mut indices: Vec<usize> = (0..param_count).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let mut mask = vec![false; param_count];
    for &i in indices.iter().take(count) {
        mask[i] = true;
    }
    Ok(mask)
}

/// Run the alternating poisoned/clean optimization and return the poisoned
/// model. `steps = 0` returns the input parameters unchanged.
pub fn pcb_train(
    model: &ModelHandle,
    data: &LabeledSet,
    trigger: &Trigger,
    cfg: &PcbConfig,
) -> Result<ModelHandle> {
    if data.is_empty() {
        return Err(Error::EmptyInput("pcb training set"));
    }
    let mut out = model.clone();
    if cfg.steps == 0 {
        return Ok(out);
    }
    let subset = sample_param_subset(out.param_count(), cfg.param_fraction, seed::derive(cfg.seed, "pcb-subset"))?;
    let mut optimizer = Optimizer::new(OptimizerKind::Adam, 0.0, 0.0, out.param_count());
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, "pcb-steps"));

    for step in 0..cfg.steps {
        let idx = rng.gen_range(0..data.len());
        let poisoned_step = step % 2 == 0;
        let (image, label) = if poisoned_step {
            (trigger.apply(&data.images[idx])?, cfg.target_class)
        } else {
            (data.images[idx].clone(), data.labels[idx])
        };
        let cache = out.forward_cached(&image)?;
        let (loss, grad_logits) = cross_entropy_with_grad(&cache.logits, label);
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        let back = out.backward(
            &cache,
            &BackwardRequest { grad_logits: Some(grad_logits), ..Default::default() },
        );
        let mask = if poisoned_step { Some(subset.as_slice()) } else { None };
        optimizer.step(&mut out.params.data, &back.param_grads, cfg.learning_rate, mask);
    }
    Ok(out)
}
