//! Backdoor detection: trigger reversal, anomaly scoring, and threshold
//! calibration.

mod calibration;
mod cnc;
mod inversion;
mod neural_cleanse;

use serde::{Deserialize, Serialize};

use crate::attack::Trigger;

pub use calibration::{
    detector_threshold_calibration, self_poison_set, self_poison_trigger, CalibrationConfig,
    CalibrationOutcome,
};
pub use cnc::{
    calibrated_inversion, repair_for_calibration, scores_against_repaired, CalibratedConfig,
};
pub use inversion::{
    calibrated_objective_grad, reversal_objective_grad, TriggerOptimizer, TriggerParams,
};
pub use neural_cleanse::{nc_detect, nc_reverse, robust_min_zscore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DetectorKind {
    /// Mask-norm anomaly over per-class reversed triggers.
    NeuralCleanse,
    /// Success-rate gap between the suspect and its repaired counterpart.
    Calibrated,
}

/// Outcome of one detection run over every class.
#[derive(Debug, Clone)]
pub struct AnomalyReport {
    pub method: DetectorKind,
    /// Per-class scores: mask L1 norms for the norm detector (smaller is
    /// more anomalous), success-rate differences in [-1, 1] for the
    /// calibrated detector (larger is more anomalous).
    pub per_class_scores: Vec<f64>,
    pub flagged_class: usize,
    /// The score the binary game thresholds: higher means more anomalous
    /// for both detectors.
    pub headline: f64,
    /// Reversed trigger per class.
    pub triggers: Vec<Trigger>,
    pub steps_per_class: usize,
    pub learning_rate: f64,
    pub norm_weight: f64,
}
