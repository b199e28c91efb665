//! Data-poisoning attacks: trigger construction, training-set poisoning, and
//! inference-time exploitation.

pub mod adv;
pub mod pcb;
pub mod trigger;
pub mod tsb;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledSet, Oracle, Provenance};
use crate::error::{Error, Result};
use crate::image::{upsample_grid, Image};
use crate::model::ModelHandle;
use crate::seed;

pub use adv::craft_adv_trigger;
pub use pcb::{pcb_train, sample_param_subset, PcbConfig};
pub use trigger::{
    blend, checker_patch_trigger, effective_patch_side, occlusion_mask, patch_side,
    refool_trigger, stamp_patch, wanet_trigger, warp_field, ApplyRule, Trigger,
};
pub use tsb::{scattered_triggers, tsb_poison, TsbMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    /// Visible patch trigger, poisoned labels.
    Badnets,
    /// Clean-label variant of the patch trigger.
    CBadnets,
    /// Full-image blended trigger with per-sample occlusion.
    ABlend,
    /// Patch trigger with per-sample occlusion.
    APatch,
    /// Clean-label adversarial perturbations crafted on a surrogate model.
    Advclean,
    /// Clean-label ghosting reflections.
    Refool,
    /// Clean-label smooth image warping.
    Wanet,
    /// Trigger-scattering: one segment per poisoned sample, all at inference.
    Tsb,
    /// Parameter-controlled code poisoning; does not poison data.
    Pcb,
}

impl AttackKind {
    pub fn is_clean_label(self) -> bool {
        matches!(self, AttackKind::CBadnets | AttackKind::Advclean | AttackKind::Refool | AttackKind::Wanet)
    }

    pub fn id(self) -> &'static str {
        match self {
            AttackKind::Badnets => "badnets",
            AttackKind::CBadnets => "c-badnets",
            AttackKind::ABlend => "a-blend",
            AttackKind::APatch => "a-patch",
            AttackKind::Advclean => "advclean",
            AttackKind::Refool => "refool",
            AttackKind::Wanet => "wanet",
            AttackKind::Tsb => "tsb",
            AttackKind::Pcb => "pcb",
        }
    }

    pub fn from_id(id: &str) -> Result<Self> {
        Ok(match id {
            "badnets" => AttackKind::Badnets,
            "c-badnets" => AttackKind::CBadnets,
            "a-blend" => AttackKind::ABlend,
            "a-patch" => AttackKind::APatch,
            "advclean" => AttackKind::Advclean,
            "refool" => AttackKind::Refool,
            "wanet" => AttackKind::Wanet,
            "tsb" => AttackKind::Tsb,
            "pcb" => AttackKind::Pcb,
            other => return Err(Error::InvalidArg(format!("unknown attack id '{other}'"))),
        })
    }
}

/// Full description of one attack instance. Serialized verbatim into
/// checkpoints and run records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub target_class: usize,
    /// Number of poisoned samples m.
    pub poison_count: usize,
    /// Boost factor b: each poisoned sample is repeated b times.
    pub boost: usize,
    /// Occlusion grid side s.
    pub grid_size: usize,
    /// Probability that an occlusion grid cell is dropped.
    pub occlusion_rate: f64,
    /// Fraction of poisoned samples that carry the target label.
    pub conservatism_ratio: f64,
    /// L-infinity budget for adversarial triggers.
    pub pgd_epsilon: f64,
    pub pgd_steps: usize,
    /// Number of scattered trigger segments k.
    pub trigger_count: usize,
    /// Fraction of parameters sampled by the code-poisoning attack.
    pub param_fraction: f64,
    /// Maximum warp displacement in pixels.
    pub warp_strength: f64,
    /// Blend opacity alpha.
    pub blend_opacity: f64,
    /// Reflection intensity for ghosting triggers.
    pub refool_intensity: f64,
    /// Optimization steps of the code-poisoning loop.
    pub pcb_steps: usize,
    pub pcb_learning_rate: f64,
    pub seed: u64,
}

impl AttackSpec {
    /// Spec with the standard operating points for the given attack.
    pub fn new(kind: AttackKind, target_class: usize, poison_count: usize, seed: u64) -> Self {
        Self {
            kind,
            target_class,
            poison_count,
            boost: 1,
            grid_size: 4,
            occlusion_rate: 0.5,
            conservatism_ratio: 0.5,
            pgd_epsilon: 8.0 / 255.0,
            pgd_steps: 4,
            trigger_count: 8,
            param_fraction: 0.05,
            warp_strength: 2.0,
            blend_opacity: 0.3,
            refool_intensity: 1.0,
            pcb_steps: 4000,
            pcb_learning_rate: 1e-3,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.boost < 1 {
            return Err(Error::InvalidArg("boost factor must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.conservatism_ratio) {
            return Err(Error::InvalidArg("conservatism ratio outside [0,1]".into()));
        }
        if self.trigger_count < 1 {
            return Err(Error::InvalidArg("trigger count k must be at least 1".into()));
        }
        if !(self.param_fraction > 0.0 && self.param_fraction <= 1.0) {
            return Err(Error::InvalidArg("param fraction outside (0,1]".into()));
        }
        Ok(())
    }

    pub fn is_clean_label(&self) -> bool {
        self.kind.is_clean_label()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelRule {
    PoisonLabel,
    CleanLabel,
}

/// Result of poisoning a training set.
#[derive(Debug, Clone)]
pub struct PoisonResult {
    /// Clean samples plus the injected poisoned copies.
    pub set: LabeledSet,
    /// Triggers used by the attack (one per segment for scattered attacks).
    pub triggers: Vec<Trigger>,
    /// Positions of all injected samples in `set`.
    pub injected: Vec<usize>,
    pub label_rule: LabelRule,
}

/// A prepared attack: the spec plus the concrete triggers and any resources
/// (surrogate model, reflection image) the attack needs.
#[derive(Debug, Clone)]
pub struct Attack {
    pub spec: AttackSpec,
    triggers: Vec<Trigger>,
    surrogate: Option<ModelHandle>,
}

impl Attack {
    /// Build the attack's triggers for images of shape
    /// `(channels, image_side, image_side)`. `surrogate` is required for
    /// adversarial triggers.
    pub fn prepare(
        spec: AttackSpec,
        channels: usize,
        image_side: usize,
        surrogate: Option<ModelHandle>,
    ) -> Result<Self> {
        spec.validate()?;
        let trigger_seed = seed::derive(spec.seed, seed::domain::ATTACK);
        let triggers = match spec.kind {
            AttackKind::Badnets | AttackKind::CBadnets | AttackKind::APatch | AttackKind::Pcb => {
                vec![checker_patch_trigger(channels, image_side)]
            }
            AttackKind::ABlend => {
                vec![Trigger::blend(
                    smooth_pattern(channels, image_side, trigger_seed),
                    Image::from_fn(1, image_side, image_side, |_, _, _| 1.0),
                    spec.blend_opacity,
                )]
            }
            AttackKind::Advclean => {
                if surrogate.is_none() {
                    return Err(Error::InvalidArg(
                        "advclean needs a surrogate model to craft triggers".into(),
                    ));
                }
                Vec::new() // crafted per image
            }
            AttackKind::Refool => {
                vec![Trigger::additive(smooth_pattern(channels, image_side, trigger_seed))]
            }
            AttackKind::Wanet => {
                vec![Trigger::warp(warp_field(trigger_seed), spec.warp_strength)]
            }
            AttackKind::Tsb => {
                scattered_triggers(channels, image_side, spec.trigger_count, trigger_seed)?
            }
        };
        Ok(Self { spec, triggers, surrogate })
    }

    pub fn label_rule(&self) -> LabelRule {
        if self.spec.is_clean_label() { LabelRule::CleanLabel } else { LabelRule::PoisonLabel }
    }

    pub fn triggers(&self) -> &[Trigger] {
        &self.triggers
    }

    /// The triggered version of one image during training-set poisoning.
    /// `sample_index` seeds per-sample randomness (occlusion, segment choice).
    fn poison_image(&self, image: &Image, sample_index: u64) -> Result<Image> {
        let spec = &self.spec;
        match spec.kind {
            AttackKind::Badnets | AttackKind::CBadnets => self.triggers[0].apply(image),
            AttackKind::APatch => {
                let base = &self.triggers[0];
                let occl = occlusion_mask(
                    base.pattern.h,
                    base.pattern.w,
                    spec.grid_size,
                    spec.occlusion_rate,
                    seed::derive_indexed(spec.seed, "occlusion", sample_index),
                )?;
                let mut masked = base.clone();
                for i in 0..masked.mask.len() {
                    masked.mask.data_mut()[i] *= occl.data()[i];
                }
                masked.apply(image)
            }
            AttackKind::ABlend => {
                let base = &self.triggers[0];
                let occl = occlusion_mask(
                    image.h,
                    image.w,
                    spec.grid_size,
                    spec.occlusion_rate,
                    seed::derive_indexed(spec.seed, "occlusion", sample_index),
                )?;
                let mut masked = base.clone();
                masked.mask = occl;
                masked.apply(image)
            }
            AttackKind::Advclean => {
                let surrogate = self.surrogate.as_ref().expect("checked in prepare");
                craft_adv_trigger(surrogate, image, spec.target_class, spec.pgd_epsilon, spec.pgd_steps)?
                    .apply(image)
            }
            AttackKind::Refool => {
                refool_trigger(image, &self.triggers[0].pattern, spec.refool_intensity)
            }
            AttackKind::Wanet => self.triggers[0].apply(image),
            AttackKind::Tsb => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed::derive_indexed(
                    spec.seed,
                    "tsb-choice",
                    sample_index,
                ));
                Ok(tsb_poison(image, spec.target_class, &self.triggers, TsbMode::Inject, &mut rng)?.0)
            }
            AttackKind::Pcb => Err(Error::InvalidArg(
                "pcb poisons the training process, not the training data".into(),
            )),
        }
    }

    /// Poison a training set: choose `m` source samples (target-class only
    /// for clean-label attacks), replace each with its triggered version, and
    /// append `b - 1` bit-identical extra copies per sample.
    pub fn poison(&self, data: &LabeledSet, oracle: &Oracle) -> Result<PoisonResult> {
        let spec = &self.spec;
        spec.validate()?;
        if spec.kind == AttackKind::Pcb {
            return Err(Error::InvalidArg(
                "pcb poisons the training process, not the training data".into(),
            ));
        }
        let m = spec.poison_count;

        let candidates: Vec<usize> = if spec.is_clean_label() {
            let mut v = Vec::new();
            for (i, img) in data.images.iter().enumerate() {
                if oracle.label_of(img)? == spec.target_class {
                    v.push(i);
                }
            }
            v
        } else {
            (0..data.len()).collect()
        };
        if candidates.len() < m {
            return Err(Error::InsufficientSamples { needed: m, available: candidates.len() });
        }

        let mut chosen = candidates;
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(spec.seed, "poison-choice"));
        chosen.shuffle(&mut rng);
        chosen.truncate(m);

        // payload/regularization split; ties round half up
        let payload_count = match spec.kind {
            AttackKind::ABlend | AttackKind::APatch => {
                (spec.conservatism_ratio * m as f64 + 0.5).floor() as usize
            }
            _ => m,
        };

        let mut out = data.clone();
        let mut injected = Vec::with_capacity(m * spec.boost);
        for (rank, &idx) in chosen.iter().enumerate() {
            let source = &data.images[idx];
            let triggered = self.poison_image(source, idx as u64)?;
            let oracle_label = oracle.label_of(source)?;
            let payload = rank < payload_count;
            let (label, provenance) = match self.label_rule() {
                LabelRule::CleanLabel => (oracle_label, Provenance::PoisonedRegularization),
                LabelRule::PoisonLabel => {
                    if payload {
                        (spec.target_class, Provenance::PoisonedPayload)
                    } else {
                        (oracle_label, Provenance::PoisonedRegularization)
                    }
                }
            };
            out.images[idx] = triggered.clone();
            out.labels[idx] = label;
            out.provenance[idx] = provenance;
            injected.push(idx);
            for _ in 1..spec.boost {
                injected.push(out.len());
                out.push(triggered.clone(), label, provenance);
            }
        }
        out.validate()?;
        Ok(PoisonResult { set: out, triggers: self.triggers.clone(), injected, label_rule: self.label_rule() })
    }

    /// Inference-time exploitation: stamp the full trigger on every image and
    /// pair it with the attacker's target label.
    pub fn exploit(&self, images: &[Image]) -> Result<(Vec<Image>, Vec<usize>)> {
        let spec = &self.spec;
        let mut stamped = Vec::with_capacity(images.len());
        for image in images {
            let out = match spec.kind {
                AttackKind::Badnets | AttackKind::CBadnets | AttackKind::APatch | AttackKind::Pcb => {
                    self.triggers[0].apply(image)?
                }
                AttackKind::ABlend => self.triggers[0].apply(image)?,
                AttackKind::Advclean => {
                    let surrogate = self.surrogate.as_ref().expect("checked in prepare");
                    craft_adv_trigger(
                        surrogate,
                        image,
                        spec.target_class,
                        spec.pgd_epsilon,
                        spec.pgd_steps,
                    )?
                    .apply(image)?
                }
                AttackKind::Refool => {
                    refool_trigger(image, &self.triggers[0].pattern, spec.refool_intensity)?
                }
                AttackKind::Wanet => self.triggers[0].apply(image)?,
                AttackKind::Tsb => {
                    let mut rng = ChaCha8Rng::seed_from_u64(0);
                    tsb_poison(image, spec.target_class, &self.triggers, TsbMode::Exploit, &mut rng)?.0
                }
            };
            stamped.push(out);
        }
        let labels = vec![spec.target_class; images.len()];
        Ok((stamped, labels))
    }
}

/// Seeded low-frequency full-image pattern used by blend and ghosting
/// triggers at desk scale.
fn smooth_pattern(channels: usize, side: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = 4;
    let mut img = Image::zeros(channels, side, side);
    for c in 0..channels {
        let coarse: Vec<f64> = (0..grid * grid).map(|_| rng.gen_range(0.0..1.0)).collect();
        let up = upsample_grid(&coarse, grid, grid, side, side);
        for y in 0..side {
            for x in 0..side {
                img.set(c, y, x, up[y * side + x]);
            }
        }
    }
    img
}
