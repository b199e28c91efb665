//! TEMPORARY calibration probes (deleted before release).

use std::time::Instant;

use poisonbench::attack::{Attack, AttackKind, AttackSpec};
use poisonbench::data::Distribution;
use poisonbench::game::{collect, GameConfig};
use poisonbench::presets;
use poisonbench::repair::{pivotal_tuning, BudgetProbes, RepairMethod};
use poisonbench::train::{accuracy, train};
use poisonbench::{detect, seed};

#[test]
#[ignore]
fn probe_training_speed_and_accuracy() {
    let t0 = Instant::now();
    let dist = Distribution::synthetic(
        presets::DESK_CLASSES,
        presets::DESK_PER_CLASS,
        presets::DESK_IMAGE_SIZE,
        0,
    )
    .unwrap();
    eprintln!("dataset generation: {:?}", t0.elapsed());

    let mut sampler = dist.sampler(1);
    let train_set = sampler.draw(presets::DESK_TRAIN_N).unwrap();
    let test_set = sampler.draw(500).unwrap();

    let t1 = Instant::now();
    let model = train(&train_set, &presets::desk_train_config(7), None).unwrap();
    let train_time = t1.elapsed();
    let acc = accuracy(&test_set.images, &test_set.labels, &model).unwrap();
    eprintln!("train 900 steps: {train_time:?}, held-out accuracy {acc:.4}, params {}", model.param_count());
}

#[test]
#[ignore]
fn probe_badnets_effectiveness() {
    let dist = Distribution::synthetic(10, 400, 16, 0).unwrap();
    let spec = AttackSpec::new(AttackKind::Badnets, 0, 100, 5);
    let attack = Attack::prepare(spec, 3, 16, None).unwrap();

    let mut sampler = dist.sampler(2);
    let clean_train = sampler.draw(2000).unwrap();
    let test_set = sampler.draw(500).unwrap();

    let poisoned = collect(&dist, &attack, 1900, 100, 3).unwrap();

    let t = Instant::now();
    let clean_model = train(&clean_train, &presets::desk_train_config(7), None).unwrap();
    let poisoned_model = train(&poisoned, &presets::desk_train_config(7), None).unwrap();
    eprintln!("2 trainings: {:?}", t.elapsed());

    let cda_clean = accuracy(&test_set.images, &test_set.labels, &clean_model).unwrap();
    let cda_poisoned = accuracy(&test_set.images, &test_set.labels, &poisoned_model).unwrap();
    let (stamped, labels) = attack.exploit(&test_set.images).unwrap();
    let asr = accuracy(&stamped, &labels, &poisoned_model).unwrap();
    let asr_clean_model = accuracy(&stamped, &labels, &clean_model).unwrap();
    eprintln!("clean CDA {cda_clean:.4}, poisoned CDA {cda_poisoned:.4}, ASR {asr:.4}, ASR(clean model) {asr_clean_model:.4}");
}

#[test]
#[ignore]
fn probe_pivotal_repair() {
    let dist = Distribution::synthetic(10, 400, 16, 0).unwrap();
    let spec = AttackSpec::new(AttackKind::Badnets, 0, 100, 5);
    let attack = Attack::prepare(spec, 3, 16, None).unwrap();

    let mut sampler = dist.sampler(2);
    let poisoned = {
        let mut s2 = dist.sampler(3);
        let _ = s2;
        collect(&dist, &attack, 1900, 100, 3).unwrap()
    };
    let trust = sampler.draw_stratified(20).unwrap();
    let eval = sampler.draw(500).unwrap();
    let test_set = sampler.draw(500).unwrap();

    let poisoned_model = train(&poisoned, &presets::desk_train_config(7), None).unwrap();
    let eval_probe = poisonbench::game::attack_success_probe(&attack, &eval).unwrap();
    let test_probe = poisonbench::game::attack_success_probe(&attack, &test_set).unwrap();

    let pre_cda = accuracy(&test_set.images, &test_set.labels, &poisoned_model).unwrap();
    let pre_asr = test_probe.asr(&poisoned_model).unwrap();
    eprintln!("pre-repair: CDA {pre_cda:.4} ASR {pre_asr:.4}");

    let probes = BudgetProbes {
        eval_images: eval.images.clone(),
        eval_labels: eval.labels.clone(),
        probe: None,
        true_probe: Some(eval_probe),
    };

    for (lw, pw, lr, momentum, steps) in [
        (0.05, 1.0, 0.01, 0.9, 1000),
        (0.05, 0.3, 0.01, 0.0, 1000),
        (0.05, 1.0, 0.01, 0.0, 1000),
        (0.05, 3.0, 0.01, 0.0, 1000),
    ] {
        let mut cfg = presets::desk_repair_config(RepairMethod::Pivotal, 9);
        cfg.latent_weight = lw;
        cfg.param_weight = pw;
        cfg.learning_rate = lr;
        cfg.momentum = momentum;
        cfg.steps = steps;
        let t = Instant::now();
        let outcome = pivotal_tuning(&poisoned_model, &trust, &cfg, &probes).unwrap();
        let chosen = outcome.best_true.as_ref().unwrap_or(&outcome.model);
        let cda = accuracy(&test_set.images, &test_set.labels, chosen).unwrap();
        let asr = test_probe.asr(chosen).unwrap();
        eprintln!(
            "lw={lw} pw={pw} lr={lr} mom={momentum} steps={steps}: CDA {cda:.4} (drop {:.4}) ASR {asr:.4} halt {:?} time {:?} records {}",
            pre_cda - cda,
            outcome.trace.halt,
            t.elapsed(),
            outcome.trace.records.len()
        );
    }
}

#[test]
#[ignore]
fn probe_detection() {
    let dist = Distribution::synthetic(10, 400, 16, 0).unwrap();
    let spec = AttackSpec::new(AttackKind::Badnets, 0, 160, 5);
    let attack = Attack::prepare(spec, 3, 16, None).unwrap();

    let mut sampler = dist.sampler(2);
    let trust = sampler.draw_stratified(100).unwrap();
    let test_set = sampler.draw(200).unwrap();

    let poisoned = collect(&dist, &attack, 1840, 160, 3).unwrap();
    let clean = collect(&dist, &attack, 2000, 0, 4).unwrap();
    let poisoned_model = train(&poisoned, &presets::desk_train_config(7), None).unwrap();
    let clean_model = train(&clean, &presets::desk_train_config(8), None).unwrap();

    let det = presets::desk_detector_config(11);
    let t = Instant::now();
    let (hp, report_p) = detect::calibrated_inversion(&poisoned_model, &trust, &test_set, &det).unwrap();
    let (hc, _) = detect::calibrated_inversion(&clean_model, &trust, &test_set, &det).unwrap();
    eprintln!("calibrated: poisoned {hp:.4} (flagged {}), clean {hc:.4}, time {:?}", report_p.flagged_class, t.elapsed());

    let t = Instant::now();
    let (np, report_np) = detect::nc_detect(&poisoned_model, &trust, 100, 0.05, 2e-2, seed::derive(1, "nc")).unwrap();
    let (ncl, _) = detect::nc_detect(&clean_model, &trust, 100, 0.05, 2e-2, seed::derive(2, "nc")).unwrap();
    eprintln!("norm-based: poisoned z {np:.4} (flagged {}), clean z {ncl:.4}, time {:?}", report_np.flagged_class, t.elapsed());
}

#[test]
#[ignore]
fn probe_game_config_sanity() {
    let cfg = GameConfig {
        n: 2000,
        r: 20,
        test_size: 500,
        train: presets::desk_train_config(0),
    };
    assert_eq!(cfg.n, 2000);
}
