//! TEMPORARY calibration probes (deleted before release).
use std::time::Instant;
use poisonbench::attack::{Attack, AttackKind, AttackSpec};
use poisonbench::data::Distribution;
use poisonbench::detect::nc_detect;
use poisonbench::game::{attack_success_probe, collect};
use poisonbench::presets;
use poisonbench::repair::{run_repair, BudgetProbes, RepairMethod};
use poisonbench::train::{accuracy, train};

#[test]
#[ignore]
fn probe_all_repair_methods() {
    let dist = Distribution::synthetic(10, 400, 16, 0).unwrap();
    let spec = AttackSpec::new(AttackKind::Badnets, 0, 100, 5);
    let attack = Attack::prepare(spec, 3, 16, None).unwrap();

    let mut sampler = dist.sampler(2);
    let trust = sampler.draw_stratified(20).unwrap();
    let eval = sampler.draw(500).unwrap();
    let test_set = sampler.draw(500).unwrap();
    let poisoned = collect(&dist, &attack, 1900, 100, 3).unwrap();
    let model = train(&poisoned, &presets::desk_train_config(7), None).unwrap();

    let eval_probe = attack_success_probe(&attack, &eval).unwrap();
    let test_probe = attack_success_probe(&attack, &test_set).unwrap();
    let pre_cda = accuracy(&test_set.images, &test_set.labels, &model).unwrap();
    let pre_asr = test_probe.asr(&model).unwrap();
    eprintln!("pre: CDA {pre_cda:.4} ASR {pre_asr:.4}");

    let probes = BudgetProbes {
        eval_images: eval.images.clone(),
        eval_labels: eval.labels.clone(),
        probe: None,
        true_probe: Some(eval_probe),
    };

    let reversed = {
        let t = Instant::now();
        let (_, report) = nc_detect(&model, &trust, 100, 0.05, 2e-2, 77).unwrap();
        eprintln!("nc reversal: flagged {} time {:?}", report.flagged_class, t.elapsed());
        report.triggers[report.flagged_class].clone()
    };

    for method in [
        RepairMethod::Pivotal,
        RepairMethod::WeightDecay,
        RepairMethod::FinePruning,
        RepairMethod::Nad,
        RepairMethod::NeuralCleanse,
    ] {
        let cfg = presets::desk_repair_config(method, 9);
        let t = Instant::now();
        let outcome = run_repair(&model, &trust, &cfg, &probes, Some(&reversed)).unwrap();
        let chosen = outcome.best_true.as_ref().unwrap_or(&outcome.model);
        let cda = accuracy(&test_set.images, &test_set.labels, chosen).unwrap();
        let asr = test_probe.asr(chosen).unwrap();
        eprintln!(
            "{:<14} CDA {cda:.4} (drop {:+.4}) ASR {asr:.4} halt {:?} time {:?}",
            cfg.method.id(),
            pre_cda - cda,
            outcome.trace.halt,
            t.elapsed()
        );
    }
}
