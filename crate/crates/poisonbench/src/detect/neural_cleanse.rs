//! Trigger-norm backdoor detection: reverse a trigger per class and flag
//! classes whose reversed trigger has an anomalously small mask norm.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::attack::Trigger;
use crate::data::LabeledSet;
use crate::detect::inversion::{reversal_objective_grad, TriggerOptimizer, TriggerParams};
use crate::detect::{AnomalyReport, DetectorKind};
use crate::error::{Error, Result};
use crate::exec;
use crate::model::ModelHandle;
use crate::seed;

/// Reverse-engineer a trigger that forces `target_class`, with an L1 penalty
/// on the mask. `steps = 0` returns the seeded random initialization.
pub fn nc_reverse(
    model: &ModelHandle,
    trust: &LabeledSet,
    target_class: usize,
    steps: usize,
    learning_rate: f64,
    norm_weight: f64,
    seed: u64,
) -> Result<Trigger> {
    if trust.is_empty() {
        return Err(Error::EmptyInput("trusted set"));
    }
    let shape = &trust.images[0];
    let mut params = TriggerParams::init(shape.c, shape.h, shape.w, seed);
    let mut optimizer = TriggerOptimizer::new(&params, learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, "nc-sampling"));
    for _ in 0..steps {
        let image = &trust.images[rng.gen_range(0..trust.len())];
        let (_, gp, gm) = reversal_objective_grad(model, image, target_class, norm_weight, &params)?;
        optimizer.step(&mut params, &gp, &gm);
    }
    Ok(params.to_trigger())
}

/// Robust z-score of the minimum against the score population:
/// `(median - min) / (1.4826 * MAD)`, zero when the spread vanishes.
pub fn robust_min_zscore(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let median = median_of(values);
    let deviations: Vec<f64> = values.iter().map(|v| (v - median).abs()).collect();
    let mad = median_of(&deviations);
    let spread = 1.4826 * mad;
    if spread <= f64::EPSILON {
        return 0.0;
    }
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    (median - min) / spread
}

fn median_of(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Run one reversal per class and report the mask-norm anomaly statistic.
/// Higher headline scores indicate a more anomalous (more likely backdoored)
/// model.
pub fn nc_detect(
    model: &ModelHandle,
    trust: &LabeledSet,
    steps_per_class: usize,
    learning_rate: f64,
    norm_weight: f64,
    seed: u64,
) -> Result<(f64, AnomalyReport)> {
    let classes = model.class_count();
    let triggers = {
        let results = exec::map_indices(classes, |class| {
            nc_reverse(
                model,
                trust,
                class,
                steps_per_class,
                learning_rate,
                norm_weight,
                seed::derive_indexed(seed, "nc-class", class as u64),
            )
        });
        results.into_iter().collect::<Result<Vec<_>>>()?
    };
    let norms: Vec<f64> = triggers.iter().map(Trigger::mask_l1).collect();
    let headline = robust_min_zscore(&norms);
    let flagged = norms
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap_or(0);
    let report = AnomalyReport {
        method: DetectorKind::NeuralCleanse,
        per_class_scores: norms,
        flagged_class: flagged,
        headline,
        triggers,
        steps_per_class,
        learning_rate,
        norm_weight,
    };
    Ok((headline, report))
}
