//! Post-training model repair.
//!
//! All repair methods share one budget-constrained fine-tuning loop: they
//! evaluate clean accuracy and ASR probes on a fixed cadence, halt when the
//! clean accuracy drops more than the budget below its pre-defense value, and
//! select a checkpoint among the in-budget evaluations. The probe signals are
//! kept separate: `asr_probe` is the defender-side self-poisoning probe used
//! for checkpoint selection, `asr_true` is the attacker-trigger signal the
//! games record for reporting.

mod baselines;
mod latent;
mod pivotal;

use serde::{Deserialize, Serialize};

use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::ModelHandle;
use crate::train::{accuracy, Optimizer, OptimizerKind};

pub use baselines::{fine_prune, nad, nc_repair, select_prune_channels, weight_decay_finetune};
pub use latent::{centroids, latent_orthogonality, latent_orthogonality_with_grad, orthogonality, orthogonality_with_grad};
pub use pivotal::pivotal_tuning;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RepairMethod {
    /// Pivotal tuning with latent orthogonalization and a parameter anchor.
    Pivotal,
    /// Plain fine-tuning with an L2 weight penalty.
    WeightDecay,
    /// Channel pruning by mean absolute activation, then fine-tuning.
    FinePruning,
    /// Attention distillation from a trusted-data fine-tuned teacher.
    Nad,
    /// Alternating fine-tuning on a reverse-engineered trigger.
    NeuralCleanse,
}

impl RepairMethod {
    pub fn id(self) -> &'static str {
        match self {
            RepairMethod::Pivotal => "pivotal",
            RepairMethod::WeightDecay => "weight-decay",
            RepairMethod::FinePruning => "fine-pruning",
            RepairMethod::Nad => "nad",
            RepairMethod::NeuralCleanse => "neural-cleanse",
        }
    }

    pub fn from_id(id: &str) -> Result<Self> {
        Ok(match id {
            "pivotal" => RepairMethod::Pivotal,
            "weight-decay" => RepairMethod::WeightDecay,
            "fine-pruning" => RepairMethod::FinePruning,
            "nad" => RepairMethod::Nad,
            "neural-cleanse" => RepairMethod::NeuralCleanse,
            other => return Err(Error::InvalidArg(format!("unknown repair method '{other}'"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RepairConfig {
    pub method: RepairMethod,
    pub steps: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    /// Latent orthogonalization weight (pivotal tuning).
    pub latent_weight: f64,
    /// Parameter-distance weight (pivotal tuning).
    pub param_weight: f64,
    /// L2 weight penalty (weight-decay fine-tuning).
    pub weight_decay: f64,
    /// Fraction of conv channels reset to zero (fine-pruning).
    pub prune_rate: f64,
    /// Fine-tuning steps for the distillation teacher.
    pub teacher_steps: usize,
    /// Exponent of the attention maps.
    pub attention_power: f64,
    /// Attention alignment weight.
    pub attention_weight: f64,
    pub batch_size: usize,
    /// Maximum tolerated drop in clean accuracy.
    pub delta_budget: f64,
    pub eval_every: usize,
    pub seed: u64,
}

impl RepairConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_weight < 0.0
            || self.param_weight < 0.0
            || self.weight_decay < 0.0
            || self.attention_weight < 0.0
        {
            return Err(Error::InvalidArg("loss weights must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.prune_rate) {
            return Err(Error::InvalidArg("prune rate outside [0,1]".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::InvalidArg("eval_every must be at least 1".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::InvalidArg("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// A set of trigger-stamped images whose predicted-target rate is an ASR.
#[derive(Debug, Clone)]
pub struct ProbeSet {
    pub images: Vec<Image>,
    pub target: usize,
}

impl ProbeSet {
    pub fn asr(&self, model: &ModelHandle) -> Result<f64> {
        let targets = vec![self.target; self.images.len()];
        accuracy(&self.images, &targets, model)
    }
}

/// Evaluation material for the budget loop.
#[derive(Debug, Clone)]
pub struct BudgetProbes {
    /// Clean split for the accuracy budget.
    pub eval_images: Vec<Image>,
    pub eval_labels: Vec<usize>,
    /// Defender-side self-poisoning probe; drives checkpoint selection.
    pub probe: Option<ProbeSet>,
    /// Attacker-trigger probe; recorded for reporting and game metrics.
    pub true_probe: Option<ProbeSet>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub cda: f64,
    pub asr_probe: Option<f64>,
    pub asr_true: Option<f64>,
    pub loss_task: f64,
    pub loss_latent: f64,
    pub loss_param: f64,
    pub in_budget: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HaltReason {
    StepsExhausted,
    BudgetHit,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RepairTrace {
    pub pre_cda: f64,
    pub records: Vec<TraceRecord>,
    pub halt: HaltReason,
}

/// Result of one repair run.
#[derive(Debug, Clone)]
pub struct RepairOutcome {
    /// Selected checkpoint: lowest self-probe ASR among in-budget
    /// evaluations when a probe is present, otherwise the last in-budget
    /// checkpoint. Falls back to the untouched input model when no
    /// evaluation stayed in budget.
    pub model: ModelHandle,
    /// Lowest true-trigger ASR among in-budget evaluations, when the
    /// attacker probe was supplied. This is the checkpoint the data
    /// efficiency metric reports on.
    pub best_true: Option<ModelHandle>,
    pub trace: RepairTrace,
}

/// Per-step loss components reported back by method step functions.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossParts {
    pub task: f64,
    pub latent: f64,
    pub param: f64,
}

struct Candidate {
    params: Vec<f64>,
    score: f64,
}

/// The shared fine-tuning loop. `step_fn` performs one optimizer step on the
/// model and returns its loss components; the loop owns evaluation cadence,
/// the accuracy budget, halting, and checkpoint selection.
///
/// Budget halting starts at the first post-update evaluation so that methods
/// with a lossy setup phase (pruning) get the chance to recover; returned
/// checkpoints are always restricted to in-budget evaluations.
pub(crate) fn finetune_loop<F>(
    start: ModelHandle,
    fallback: &ModelHandle,
    cfg: &RepairConfig,
    probes: &BudgetProbes,
    pre_cda: f64,
    mut step_fn: F,
) -> Result<RepairOutcome>
where
    F: FnMut(&mut ModelHandle, &mut Optimizer, usize) -> Result<LossParts>,
{
    cfg.validate()?;
    let mut model = start;
    let mut optimizer =
        Optimizer::new(cfg.optimizer, cfg.momentum, 0.0, model.param_count());

    let mut records = Vec::new();
    let mut halt = HaltReason::StepsExhausted;
    let mut best_probe: Option<Candidate> = None;
    let mut best_true: Option<Candidate> = None;
    let mut last_in_budget: Option<Vec<f64>> = None;

    let evaluate = |model: &ModelHandle,
                        step: usize,
                        losses: LossParts,
                        records: &mut Vec<TraceRecord>,
                        best_probe: &mut Option<Candidate>,
                        best_true: &mut Option<Candidate>,
                        last_in_budget: &mut Option<Vec<f64>>|
     -> Result<bool> {
        let cda = accuracy(&probes.eval_images, &probes.eval_labels, model)?;
        let asr_probe = probes.probe.as_ref().map(|p| p.asr(model)).transpose()?;
        let asr_true = probes.true_probe.as_ref().map(|p| p.asr(model)).transpose()?;
        let in_budget = cda >= pre_cda - cfg.delta_budget;
        records.push(TraceRecord {
            step,
            cda,
            asr_probe,
            asr_true,
            loss_task: losses.task,
            loss_latent: losses.latent,
            loss_param: losses.param,
            in_budget,
        });
        if in_budget {
            *last_in_budget = Some(model.params.data.clone());
            if let Some(score) = asr_probe {
                if best_probe.as_ref().map_or(true, |b| score < b.score) {
                    *best_probe = Some(Candidate { params: model.params.data.clone(), score });
                }
            }
            if let Some(score) = asr_true {
                if best_true.as_ref().map_or(true, |b| score < b.score) {
                    *best_true = Some(Candidate { params: model.params.data.clone(), score });
                }
            }
        }
        Ok(in_budget)
    };

    evaluate(
        &model,
        0,
        LossParts::default(),
        &mut records,
        &mut best_probe,
        &mut best_true,
        &mut last_in_budget,
    )?;

    for step in 0..cfg.steps {
        let losses = step_fn(&mut model, &mut optimizer, step)?;
        if !losses.task.is_finite() || !losses.latent.is_finite() || !losses.param.is_finite() {
            return Err(Error::Divergence { step, loss: losses.task });
        }
        let steps_done = step + 1;
        if steps_done % cfg.eval_every == 0 || steps_done == cfg.steps {
            let in_budget = evaluate(
                &model,
                steps_done,
                losses,
                &mut records,
                &mut best_probe,
                &mut best_true,
                &mut last_in_budget,
            )?;
            if !in_budget {
                halt = HaltReason::BudgetHit;
                break;
            }
        }
    }

    let with_params = |params: Vec<f64>| -> ModelHandle {
        let mut m = model.clone();
        m.params.data = params;
        m
    };
    let selected = match (best_probe, last_in_budget) {
        (Some(c), _) => with_params(c.params),
        (None, Some(p)) => with_params(p),
        (None, None) => fallback.clone(),
    };
    let best_true_model = best_true.map(|c| with_params(c.params));

    Ok(RepairOutcome {
        model: selected,
        best_true: best_true_model,
        trace: RepairTrace { pre_cda, records, halt },
    })
}

/// Class-stratified batch of indices into `trust`. When the batch covers the
/// whole set the full index range is returned; otherwise every class gets an
/// equal share (rounded up for low class indices).
pub(crate) fn stratified_batch(
    trust: &LabeledSet,
    batch_size: usize,
    rng: &mut impl rand::Rng,
) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let n = trust.len();
    if batch_size >= n {
        return (0..n).collect();
    }
    let classes = trust.class_count;
    let mut batch = Vec::with_capacity(batch_size);
    for class in 0..classes {
        let quota = batch_size / classes + usize::from(class < batch_size % classes);
        let mut pool = trust.indices_with_label(class);
        pool.shuffle(rng);
        batch.extend(pool.into_iter().take(quota));
    }
    batch
}

/// Run the repair method named in the config.
pub fn run_repair(
    pivot: &ModelHandle,
    trust: &LabeledSet,
    cfg: &RepairConfig,
    probes: &BudgetProbes,
    reversed_trigger: Option<&crate::attack::Trigger>,
) -> Result<RepairOutcome> {
    match cfg.method {
        RepairMethod::Pivotal => pivotal_tuning(pivot, trust, cfg, probes),
        RepairMethod::WeightDecay => weight_decay_finetune(pivot, trust, cfg, probes),
        RepairMethod::FinePruning => fine_prune(pivot, trust, cfg, probes),
        RepairMethod::Nad => nad(pivot, trust, cfg, probes),
        RepairMethod::NeuralCleanse => {
            let trigger = reversed_trigger.ok_or_else(|| {
                Error::InvalidArg("neural-cleanse repair needs a reversed trigger".into())
            })?;
            nc_repair(pivot, trust, trigger, cfg, probes)
        }
    }
}
