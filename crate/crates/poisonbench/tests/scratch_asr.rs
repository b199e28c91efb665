use std::time::Instant;
use poisonbench::attack::{Attack, AttackKind, AttackSpec};
use poisonbench::data::Distribution;
use poisonbench::game::collect;
use poisonbench::train::{accuracy, train, LrSchedule, OptimizerKind, TrainConfig, TrainLength};

#[test]
#[ignore]
fn probe_asr_matrix() {
    let dist = Distribution::synthetic(10, 400, 16, 0).unwrap();
    let mut sampler = dist.sampler(2);
    let test_set = sampler.draw(300).unwrap();

    for (m, steps, batch, schedule) in [
        (10usize, 1200usize, 16usize, LrSchedule::Cosine),
        (40, 1200, 16, LrSchedule::Cosine),
        (100, 1200, 16, LrSchedule::Cosine),
        (160, 1200, 16, LrSchedule::Cosine),
    ] {
        let spec = AttackSpec::new(AttackKind::Badnets, 0, m, 5);
        let attack = Attack::prepare(spec, 3, 16, None).unwrap();
        let poisoned = collect(&dist, &attack, 2000 - m, m, 3).unwrap();
        let cfg = TrainConfig {
            length: TrainLength::Steps(steps),
            optimizer: OptimizerKind::Adam,
            learning_rate: 3e-3,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: batch,
            schedule,
            seed: 7,
        };
        let t = Instant::now();
        let model = train(&poisoned, &cfg, None).unwrap();
        let elapsed = t.elapsed();
        // fit on the poisoned training samples themselves
        let poison_idx: Vec<usize> = (0..poisoned.len())
            .filter(|&i| poisoned.provenance[i] != poisonbench::data::Provenance::Clean)
            .collect();
        let pimgs: Vec<_> = poison_idx.iter().map(|&i| poisoned.images[i].clone()).collect();
        let plabels: Vec<_> = poison_idx.iter().map(|&i| poisoned.labels[i]).collect();
        let fit = accuracy(&pimgs, &plabels, &model).unwrap();
        let cda = accuracy(&test_set.images, &test_set.labels, &model).unwrap();
        let (stamped, labels) = attack.exploit(&test_set.images).unwrap();
        let asr = accuracy(&stamped, &labels, &model).unwrap();
        eprintln!(
            "m={m} steps={steps} sched={schedule:?}: fit-on-poisons {fit:.3}, CDA {cda:.3}, ASR {asr:.3} ({elapsed:?})"
        );
    }
}
