use circuit_seed::discovery::random_circuit;
use circuit_seed::mask::Mask;
use circuit_seed::rng::SeededRng;
use circuit_seed::task::{make_task, TargetKind, TargetSpec, TaskInstance};
use circuit_seed::training::{train, ATraining, Regime, TrainConfig};
use proptest::prelude::*;

fn small_task(kind: TargetKind, seed: u64) -> TaskInstance {
    let mut spec = TargetSpec::of_kind(kind, seed);
    spec.heldout_size = 64;
    make_task(&spec, &mut SeededRng::new(seed + 100)).unwrap()
}

fn short(regime: Regime, seed: u64, steps: usize) -> TrainConfig {
    let mut c = TrainConfig::for_regime(regime, seed);
    c.steps = steps;
    c.eval_every = steps;
    c
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn entries_outside_the_mask_stay_zero(seed in 0u64..1000, k in 0usize..=1024, noisy in any::<bool>()) {
        let task = small_task(TargetKind::SparseB, seed % 3);
        let mask = random_circuit(k, 64, 16, &mut SeededRng::new(seed)).unwrap().to_mask(64, 16).unwrap();
        let regime = if noisy { Regime::Noisy } else { Regime::Clean };
        let run = train(&task, &short(regime, seed, 30).with_mask(mask.clone())).unwrap();
        for (i, &v) in run.model.b.as_slice().iter().enumerate() {
            if !mask.bits()[i] {
                prop_assert_eq!(v, 0.0);
            }
        }
        prop_assert_eq!(&run.model.a, &task.base.a);
        prop_assert_eq!(&run.model.w1, &task.base.w1);
    }
}

#[test]
fn full_mask_equals_unmasked_training_bit_for_bit() {
    for (kind, regime) in [(TargetKind::DenseRank2, Regime::Clean), (TargetKind::SparseB, Regime::Noisy)] {
        let task = small_task(kind, 1);
        let masked = train(&task, &short(regime, 9, 200).with_mask(Mask::full(64, 16))).unwrap();
        let plain = train(&task, &short(regime, 9, 200)).unwrap();
        assert_eq!(masked.model.b, plain.model.b);
        assert_eq!(masked.report.records, plain.report.records);
    }
}

#[test]
fn a_receives_no_update_on_the_first_step_from_zero() {
    let task = small_task(TargetKind::SparseB, 2);
    for regime in [Regime::Clean, Regime::Noisy] {
        let mut full = short(regime, 4, 1).full_lora();
        full.steps = 1;
        assert_eq!(train(&task, &full).unwrap().model.a, task.base.a);

        let a_mask = random_circuit(64, 16, 128, &mut SeededRng::new(1)).unwrap().to_mask(16, 128).unwrap();
        let mut split = short(regime, 4, 1).with_mask(Mask::full(64, 16));
        split.a_training = ATraining::Masked(a_mask.clone());
        assert_eq!(train(&task, &split).unwrap().model.a, task.base.a);

        // after B has moved, A starts to move, and only inside its mask
        split.steps = 5;
        let later = train(&task, &split).unwrap().model;
        assert_ne!(later.a, task.base.a);
        for (i, (&now, &before)) in later.a.as_slice().iter().zip(task.base.a.as_slice()).enumerate() {
            if !a_mask.bits()[i] {
                assert_eq!(now, before);
            }
        }
    }
}

#[test]
fn training_is_deterministic_per_seed() {
    let task = small_task(TargetKind::SparseB, 3);
    let a = train(&task, &short(Regime::Noisy, 5, 300)).unwrap();
    let b = train(&task, &short(Regime::Noisy, 5, 300)).unwrap();
    let c = train(&task, &short(Regime::Noisy, 6, 300)).unwrap();
    assert_eq!(a.model.b, b.model.b);
    assert_ne!(a.model.b, c.model.b);
}

#[test]
fn records_are_ordered_and_end_with_the_final_value() {
    let task = small_task(TargetKind::DenseRank2, 4);
    let mut cfg = short(Regime::Clean, 1, 100);
    cfg.eval_every = 25;
    let run = train(&task, &cfg).unwrap();
    let steps: Vec<usize> = run.report.records.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![0, 25, 50, 75, 100]);
    assert_eq!(run.report.records[0].relative_mse, 1.0);
    assert_eq!(run.report.final_relative_mse, run.report.records.last().unwrap().relative_mse);
}
