//! Threshold calibration for the binary detection game.
//!
//! The defender owns only the suspect checkpoint and the trusted data, so
//! they calibrate by poisoning their own models: fine-tune copies of the
//! suspect model on clean trusted data and on trusted data spiked with a
//! patch trigger they control, score both populations with calibrated
//! inversion, and place the decision threshold between the two score means.

use crate::attack::Trigger;
use crate::data::{LabeledSet, Provenance};
use crate::detect::cnc::{calibrated_inversion, CalibratedConfig};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::ModelHandle;
use crate::seed;
use crate::train::{train, TrainConfig};

#[derive(Debug, Clone)]
pub struct CalibrationConfig {
    /// Clean/poisoned model pairs to build.
    pub pairs: usize,
    /// Fine-tuning configuration for the self-built models.
    pub finetune: TrainConfig,
    /// Fraction of the trusted set to spike with the self-trigger.
    pub poison_fraction: f64,
    pub detector: CalibratedConfig,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct CalibrationOutcome {
    pub threshold: f64,
    pub poisoned_scores: Vec<f64>,
    pub clean_scores: Vec<f64>,
}

/// The defender's own patch trigger: bottom-right corner, so it never
/// coincides with an attacker patch at the canonical top-left position.
pub fn self_poison_trigger(channels: usize, image_side: usize) -> Trigger {
    let side = crate::attack::effective_patch_side(image_side);
    let pattern = Image::from_fn(channels, side, side, |_, y, x| {
        if (y + x) % 2 == 0 { 0.0 } else { 1.0 }
    });
    Trigger::stamp(pattern, (image_side - side, image_side - side))
}

/// Spike a copy of the trusted set: append triggered copies of a fraction of
/// samples, labeled with the self-poison target.
pub fn self_poison_set(
    trust: &LabeledSet,
    trigger: &Trigger,
    target: usize,
    fraction: f64,
) -> Result<LabeledSet> {
    let mut out = trust.clone();
    let count = ((trust.len() as f64 * fraction).round() as usize).max(1);
    for i in 0..count.min(trust.len()) {
        let stamped = trigger.apply(&trust.images[i])?;
        out.push(stamped, target, Provenance::PoisonedPayload);
    }
    Ok(out)
}

/// Build self-clean and self-poisoned models from the suspect checkpoint and
/// fit a threshold on their calibrated-inversion scores.
pub fn detector_threshold_calibration(
    suspect: &ModelHandle,
    trust: &LabeledSet,
    cfg: &CalibrationConfig,
) -> Result<CalibrationOutcome> {
    if cfg.pairs == 0 {
        return Err(Error::InvalidArg("calibration needs at least one pair".into()));
    }
    let shape = &trust.images[0];
    let trigger = self_poison_trigger(shape.c, shape.h);
    let target = 0usize;

    let mut poisoned_scores = Vec::with_capacity(cfg.pairs);
    let mut clean_scores = Vec::with_capacity(cfg.pairs);
    for pair in 0..cfg.pairs {
        let pair_seed = seed::derive_indexed(cfg.seed, "calibration-pair", pair as u64);

        let mut clean_cfg = cfg.finetune;
        clean_cfg.seed = seed::derive(pair_seed, "clean");
        let self_clean = train(trust, &clean_cfg, Some(suspect))?;

        let spiked = self_poison_set(trust, &trigger, target, cfg.poison_fraction)?;
        let mut poison_cfg = cfg.finetune;
        poison_cfg.seed = seed::derive(pair_seed, "poisoned");
        let self_poisoned = train(&spiked, &poison_cfg, Some(suspect))?;

        let mut det = cfg.detector.clone();
        det.seed = seed::derive(pair_seed, "detector");
        clean_scores.push(calibrated_inversion(&self_clean, trust, trust, &det)?.0);
        poisoned_scores.push(calibrated_inversion(&self_poisoned, trust, trust, &det)?.0);
    }

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let threshold = 0.5 * (mean(&poisoned_scores) + mean(&clean_scores));
    Ok(CalibrationOutcome { threshold, poisoned_scores, clean_scores })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic_dataset;

    #[test]
    fn self_trigger_sits_bottom_right() {
        let t = self_poison_trigger(3, 16);
        assert_eq!(t.location, (13, 13));
    }

    #[test]
    fn spiked_set_appends_targeted_copies() {
        let (data, _) = generate_synthetic_dataset(3, 10, 8, 0).unwrap();
        let trigger = self_poison_trigger(3, 8);
        let spiked = self_poison_set(&data, &trigger, 1, 0.2).unwrap();
        assert_eq!(spiked.len(), data.len() + 6);
        for i in data.len()..spiked.len() {
            assert_eq!(spiked.labels[i], 1);
            assert_eq!(spiked.provenance[i], Provenance::PoisonedPayload);
        }
    }

    #[test]
    fn threshold_lies_between_means() {
        // threshold construction is pure arithmetic over the score lists
        let outcome = CalibrationOutcome {
            threshold: 0.5 * (0.8 + 0.2),
            poisoned_scores: vec![0.7, 0.9],
            clean_scores: vec![0.1, 0.3],
        };
        let mp = outcome.poisoned_scores.iter().sum::<f64>() / 2.0;
        let mc = outcome.clean_scores.iter().sum::<f64>() / 2.0;
        assert!(outcome.threshold > mc && outcome.threshold < mp);
    }
}
