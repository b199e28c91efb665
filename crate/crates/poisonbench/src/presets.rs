//! Standard configurations: the desk-scale operating points used by the
//! test suites and the CLI defaults, plus the published CIFAR-10 reference
//! settings for comparison runs at full scale.

use crate::detect::CalibratedConfig;
use crate::game::GameConfig;
use crate::repair::{RepairConfig, RepairMethod};
use crate::train::{LrSchedule, OptimizerKind, TrainConfig, TrainLength};

/// Desk-scale dataset: 10 classes of 16x16 images; the pool holds enough
/// samples for a 2000-sample training draw plus disjoint trusted/eval/test
/// draws.
pub const DESK_CLASSES: usize = 10;
pub const DESK_PER_CLASS: usize = 400;
pub const DESK_IMAGE_SIZE: usize = 16;
pub const DESK_TRAIN_N: usize = 2000;
pub const DESK_TEST_SIZE: usize = 500;

/// Maximum tolerated clean-accuracy drop for every defense.
pub const DESK_DELTA: f64 = 0.02;

/// Trusted-data sweep, as fractions of the training-set size.
pub const DESK_R_FRACTIONS: [f64; 3] = [0.01, 0.025, 0.05];

pub fn desk_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        length: TrainLength::Steps(1200),
        optimizer: OptimizerKind::Adam,
        learning_rate: 3e-3,
        momentum: 0.9,
        weight_decay: 0.0,
        batch_size: 16,
        schedule: LrSchedule::Cosine,
        seed,
    }
}

pub fn desk_game_config(seed: u64) -> GameConfig {
    GameConfig {
        n: DESK_TRAIN_N,
        r: (DESK_TRAIN_N as f64 * 0.01) as usize,
        test_size: DESK_TEST_SIZE,
        train: desk_train_config(seed),
    }
}

fn desk_repair_base(method: RepairMethod, seed: u64) -> RepairConfig {
    RepairConfig {
        method,
        steps: 600,
        learning_rate: 0.01,
        optimizer: OptimizerKind::Sgd,
        momentum: 0.9,
        latent_weight: 0.0,
        param_weight: 0.0,
        weight_decay: 0.0,
        prune_rate: 0.0,
        teacher_steps: 0,
        attention_power: 2.0,
        attention_weight: 0.0,
        batch_size: 128,
        delta_budget: DESK_DELTA,
        eval_every: 25,
        seed,
    }
}

/// Desk operating points per repair method, fixed once with the same
/// self-poisoning grid-search protocol the harness exposes.
pub fn desk_repair_config(method: RepairMethod, seed: u64) -> RepairConfig {
    let mut cfg = desk_repair_base(method, seed);
    match method {
        RepairMethod::Pivotal => {
            cfg.latent_weight = 0.05;
            cfg.param_weight = 1.0;
            cfg.learning_rate = 0.01;
            cfg.steps = 600;
        }
        RepairMethod::WeightDecay => {
            cfg.weight_decay = 0.01;
            cfg.learning_rate = 0.001;
            cfg.steps = 600;
        }
        RepairMethod::FinePruning => {
            cfg.prune_rate = 0.3;
            cfg.learning_rate = 0.001;
            cfg.steps = 600;
        }
        RepairMethod::Nad => {
            cfg.teacher_steps = 200;
            cfg.attention_weight = 1000.0;
            cfg.attention_power = 2.0;
            cfg.steps = 600;
        }
        RepairMethod::NeuralCleanse => {
            cfg.learning_rate = 0.001;
            cfg.steps = 600;
        }
    }
    cfg
}

/// Desk operating point of the calibrated-inversion detector.
pub fn desk_detector_config(seed: u64) -> CalibratedConfig {
    let mut repair = desk_repair_config(RepairMethod::Pivotal, seed);
    repair.steps = 200;
    repair.eval_every = 50;
    CalibratedConfig { steps_per_class: 100, learning_rate: 0.05, repair, seed }
}

/// Norm-detector operating point (steps per class, learning rate, mask
/// penalty).
pub const DESK_NC_STEPS: usize = 100;
pub const DESK_NC_LR: f64 = 0.05;
pub const DESK_NC_NORM_WEIGHT: f64 = 2e-2;

/// Published CIFAR-10 training configuration: 120 epochs of SGD, momentum
/// 0.9, learning rate 0.1, weight decay 5e-4, batch 128, cosine annealing.
pub fn cifar10_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        length: TrainLength::Epochs(120),
        optimizer: OptimizerKind::Sgd,
        learning_rate: 0.1,
        momentum: 0.9,
        weight_decay: 0.0005,
        batch_size: 128,
        schedule: LrSchedule::Cosine,
        seed,
    }
}

/// Published CIFAR-10 operating points of the repair methods.
pub fn cifar10_repair_config(method: RepairMethod, seed: u64) -> RepairConfig {
    let mut cfg = desk_repair_base(method, seed);
    cfg.batch_size = 128;
    match method {
        RepairMethod::Pivotal => {
            cfg.steps = 2000;
            cfg.learning_rate = 0.01;
            cfg.latent_weight = 0.05;
            cfg.param_weight = 20_000.0;
        }
        RepairMethod::WeightDecay => {
            cfg.steps = 1000;
            cfg.learning_rate = 0.001;
            cfg.weight_decay = 0.01;
        }
        RepairMethod::FinePruning => {
            cfg.steps = 1000;
            cfg.learning_rate = 0.001;
            cfg.prune_rate = 0.96;
        }
        RepairMethod::Nad => {
            cfg.steps = 2000;
            cfg.learning_rate = 0.01;
            cfg.teacher_steps = 1000;
            cfg.attention_power = 2.0;
            cfg.attention_weight = 1000.0;
        }
        RepairMethod::NeuralCleanse => {
            cfg.steps = 1000;
            cfg.learning_rate = 0.001;
        }
    }
    cfg
}

/// Published CIFAR-10 trigger-reversal settings.
pub const CIFAR10_NC_STEPS_PER_CLASS: usize = 100;
pub const CIFAR10_NC_NORM_WEIGHT: f64 = 2e-2;
