//! Calibrated trigger inversion: repair the suspect model first, then
//! reverse triggers that misclassify under the suspect model while staying
//! correctly classified under the repaired model. The per-class anomaly
//! score is the success-rate gap between the two models on the stamped test
//! set; the headline score is the largest per-class score.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::data::LabeledSet;
use crate::detect::inversion::{calibrated_objective_grad, TriggerOptimizer, TriggerParams};
use crate::detect::{AnomalyReport, DetectorKind};
use crate::error::{Error, Result};
use crate::exec;
use crate::image::Image;
use crate::model::ModelHandle;
use crate::repair::{pivotal_tuning, BudgetProbes, RepairConfig};
use crate::seed;
use crate::train::accuracy;

#[derive(Debug, Clone)]
pub struct CalibratedConfig {
    pub steps_per_class: usize,
    pub learning_rate: f64,
    /// Configuration of the internal pivotal-tuning repair stage.
    pub repair: RepairConfig,
    pub seed: u64,
}

/// Run calibrated trigger inversion against a suspect model.
///
/// The internal repair stage sees only the trusted data (its accuracy budget
/// is evaluated on the trusted set itself). `test` provides the images the
/// per-class success rates are measured on; its labels are the ground truth.
pub fn calibrated_inversion(
    suspect: &ModelHandle,
    trust: &LabeledSet,
    test: &LabeledSet,
    cfg: &CalibratedConfig,
) -> Result<(f64, AnomalyReport)> {
    if test.is_empty() {
        return Err(Error::EmptyInput("test set"));
    }
    let repaired = repair_for_calibration(suspect, trust, &cfg.repair)?;
    scores_against_repaired(suspect, &repaired, trust, test, cfg)
}

/// The repair stage used before inversion: pivotal tuning with the trusted
/// set doubling as the budget evaluation split.
pub fn repair_for_calibration(
    suspect: &ModelHandle,
    trust: &LabeledSet,
    repair_cfg: &RepairConfig,
) -> Result<ModelHandle> {
    let probes = BudgetProbes {
        eval_images: trust.images.clone(),
        eval_labels: trust.labels.clone(),
        probe: None,
        true_probe: None,
    };
    Ok(pivotal_tuning(suspect, trust, repair_cfg, &probes)?.model)
}

/// Inversion and scoring once a repaired model is available.
pub fn scores_against_repaired(
    suspect: &ModelHandle,
    repaired: &ModelHandle,
    trust: &LabeledSet,
    test: &LabeledSet,
    cfg: &CalibratedConfig,
) -> Result<(f64, AnomalyReport)> {
    let classes = suspect.class_count();
    let outcomes = {
        let results = exec::map_indices(classes, |class| {
            reverse_one_class(suspect, repaired, trust, test, class, cfg)
        });
        results.into_iter().collect::<Result<Vec<_>>>()?
    };

    let mut per_class_scores = Vec::with_capacity(classes);
    let mut triggers = Vec::with_capacity(classes);
    for (score, trigger) in outcomes {
        per_class_scores.push(score);
        triggers.push(trigger);
    }
    let flagged = per_class_scores
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap_or(0);
    let headline = per_class_scores[flagged];
    let report = AnomalyReport {
        method: DetectorKind::Calibrated,
        per_class_scores,
        flagged_class: flagged,
        headline,
        triggers,
        steps_per_class: cfg.steps_per_class,
        learning_rate: cfg.learning_rate,
        norm_weight: 0.0,
    };
    Ok((headline, report))
}

fn reverse_one_class(
    suspect: &ModelHandle,
    repaired: &ModelHandle,
    trust: &LabeledSet,
    test: &LabeledSet,
    class: usize,
    cfg: &CalibratedConfig,
) -> Result<(f64, crate::attack::Trigger)> {
    let shape = &trust.images[0];
    let class_seed = seed::derive_indexed(cfg.seed, "calibrated-class", class as u64);
    let mut params = TriggerParams::init(shape.c, shape.h, shape.w, class_seed);
    let mut optimizer = TriggerOptimizer::new(&params, cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(class_seed, "sampling"));

    for _ in 0..cfg.steps_per_class {
        let idx = rng.gen_range(0..trust.len());
        let image = &trust.images[idx];
        let true_label = trust.labels[idx];
        let (_, gp, gm) =
            calibrated_objective_grad(suspect, repaired, image, class, true_label, &params)?;
        optimizer.step(&mut params, &gp, &gm);
    }

    // score = Acc(stamped -> class; suspect) - Acc(stamped -> truth; repaired)
    let stamped: Vec<Image> = {
        let applied = exec::map(&test.images, |im| params.apply(im));
        applied.into_iter().collect::<Result<Vec<_>>>()?
    };
    let to_class = vec![class; stamped.len()];
    let forced = accuracy(&stamped, &to_class, suspect)?;
    let preserved = accuracy(&stamped, &test.labels, repaired)?;
    Ok((forced - preserved, params.to_trigger()))
}
