//! Adversarially crafted additive triggers via projected gradient descent.

use crate::attack::trigger::Trigger;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{cross_entropy_with_grad, BackwardRequest, ModelHandle};

/// Craft a per-image additive perturbation that pushes `base_model` toward
/// `target_class`, with an L-infinity budget of `epsilon`.
///
/// Targeted PGD with signed steps of size `2.5 * epsilon / steps`, projected
/// onto the epsilon ball after every update. `steps = 0` returns the zero
/// perturbation.
pub fn craft_adv_trigger(
    base_model: &ModelHandle,
    image: &Image,
    target_class: usize,
    epsilon: f64,
    steps: usize,
) -> Result<Trigger> {
    if epsilon < 0.0 {
        return Err(Error::InvalidArg("epsilon must be non-negative".into()));
    }
    let mut delta = vec![0.0; image.len()];
    if steps > 0 {
        let step_size = 2.5 * epsilon / steps as f64;
        for _ in 0..steps {
            let mut perturbed = image.clone();
            for (p, d) in perturbed.data_mut().iter_mut().zip(&delta) {
                *p = (*p + d).clamp(0.0, 1.0);
            }
            let cache = base_model.forward_cached(&perturbed)?;
            let (_, grad_logits) = cross_entropy_with_grad(&cache.logits, target_class);
            let back = base_model.backward(
                &cache,
                &BackwardRequest {
                    grad_logits: Some(grad_logits),
                    want_input_grad: true,
                    ..Default::default()
                },
            );
            let grad = back.input_grad.expect("input gradient requested");
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient("pgd trigger crafting"));
            }
            for (d, g) in delta.iter_mut().zip(&grad) {
                // descend on the targeted cross-entropy
                *d = (*d - step_size * g.signum()).clamp(-epsilon, epsilon);
            }
        }
    }
    let pattern = Image::from_vec(image.c, image.h, image.w, delta)?;
    Ok(Trigger::additive(pattern))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn probe(seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(3, 8, 8, |_, _, _| rng.gen())
    }

    #[test]
    fn zero_steps_is_identity() {
        let model = ModelHandle::init(Architecture::tiny(3, 8, 4).unwrap(), 0);
        let img = probe(1);
        let trigger = craft_adv_trigger(&model, &img, 2, 8.0 / 255.0, 0).unwrap();
        assert_eq!(trigger.apply(&img).unwrap(), img);
    }

    #[test]
    fn perturbation_respects_budget() {
        let model = ModelHandle::init(Architecture::tiny(3, 8, 4).unwrap(), 0);
        let eps = 8.0 / 255.0;
        for seed in 0..100 {
            let img = probe(seed);
            let trigger = craft_adv_trigger(&model, &img, 1, eps, 4).unwrap();
            let out = trigger.apply(&img).unwrap();
            assert!(out.linf_distance(&img) <= eps + 1e-12);
        }
    }

    #[test]
    fn targeted_logit_increases() {
        // even an untrained model should show the targeted logit rising
        let model = ModelHandle::init(Architecture::tiny(3, 8, 4).unwrap(), 3);
        let mut improved = 0;
        let n = 40;
        for seed in 0..n {
            let img = probe(seed + 100);
            let before = model.logits(&img).unwrap()[1];
            let trigger = craft_adv_trigger(&model, &img, 1, 8.0 / 255.0, 4).unwrap();
            let after = model.logits(&trigger.apply(&img).unwrap()).unwrap()[1];
            if after > before {
                improved += 1;
            }
        }
        assert!(improved as f64 / n as f64 >= 0.9, "only {improved}/{n} improved");
    }
}
