//! Run-protocol checks on the synthetic tasks, 10 seeds each.

use std::collections::HashSet;

use circuit_seed::diagnostics::{knockout_sweep, per_example_gradients, sign_consistency, signal_retention, svd_alignment};
use circuit_seed::discovery::{accumulate, accumulate_nested, overlap, random_circuit, score, select_top_k, Method};
use circuit_seed::linalg::matmul;
use circuit_seed::mask::Mask;
use circuit_seed::model::AdaptedModel;
use circuit_seed::rng::{gaussian_fill, SeededRng};
use circuit_seed::task::{make_task, TargetKind, TargetSpec, TaskInstance};

const SEEDS: u64 = 10;

fn task(kind: TargetKind, seed: u64) -> TaskInstance {
    make_task(&TargetSpec::of_kind(kind, seed), &mut SeededRng::new(500 + seed)).unwrap()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn baselines_are_positive_for_both_kinds() {
    for seed in 0..SEEDS {
        for kind in [TargetKind::DenseRank2, TargetKind::SparseB] {
            let t = task(kind, seed);
            assert!(t.baseline_mse > 0.0);
            assert_eq!(t.heldout_relative_mse(&t.base).unwrap(), 1.0);
        }
    }
}

#[test]
fn s_hat_recovers_the_sparse_support() {
    let mut recall = Vec::new();
    let mut sf_overlap = Vec::new();
    let mut amplification = Vec::new();
    for seed in 0..SEEDS {
        let t = task(TargetKind::SparseB, seed);
        let stats = accumulate(&t.base, &t, 100, 128, &mut SeededRng::new(seed)).unwrap();
        let s = select_top_k(&score(&stats, Method::SHat, &t.base).unwrap(), 51, Method::SHat).unwrap();
        let f = select_top_k(&score(&stats, Method::FHat, &t.base).unwrap(), 51, Method::FHat).unwrap();
        let support: HashSet<(usize, usize)> = t.large_support.iter().copied().collect();
        recall.push(s.coords().filter(|c| support.contains(c)).count() as f64 / support.len() as f64);
        sf_overlap.push(overlap(&s, &f).unwrap());

        let g = stats.mean();
        let informed = signal_retention(g.as_slice(), &s.to_mask(64, 16).unwrap()).unwrap();
        let random = 51.0 / 1024.0;
        amplification.push(informed / random);
    }
    // chance level is 51 / 1024
    assert!(mean(&recall) >= 0.4, "support recall {recall:?}");
    assert!(mean(&sf_overlap) >= 0.5, "s_hat/f_hat overlap {sf_overlap:?}");
    assert!(mean(&amplification) >= 5.0, "amplification {amplification:?}");
}

#[test]
fn few_passes_already_give_the_reference_circuit() {
    let mut at25 = Vec::new();
    for seed in 0..SEEDS {
        let t = task(TargetKind::SparseB, seed);
        let snaps = accumulate_nested(&t.base, &t, &[25, 100], 128, &mut SeededRng::new(seed)).unwrap();
        let pick = |i: usize| select_top_k(&score(&snaps[i], Method::SHat, &t.base).unwrap(), 51, Method::SHat).unwrap();
        at25.push(overlap(&pick(0), &pick(1)).unwrap());
        assert_eq!(overlap(&pick(1), &pick(1)).unwrap(), 1.0);
    }
    assert!(mean(&at25) >= 0.8, "{at25:?}");
}

#[test]
fn nested_statistics_are_prefixes() {
    let t = task(TargetKind::SparseB, 0);
    let snaps = accumulate_nested(&t.base, &t, &[3, 7], 16, &mut SeededRng::new(1)).unwrap();
    let direct = accumulate(&t.base, &t, 3, 16, &mut SeededRng::new(1)).unwrap();
    assert_eq!(snaps[0], direct);
    assert_eq!(snaps[1].n, 7);
}

#[test]
fn gradient_signs_agree_more_on_the_true_support() {
    let mut inside = Vec::new();
    let mut outside = Vec::new();
    for seed in 0..SEEDS {
        let t = task(TargetKind::SparseB, seed);
        let samples = per_example_gradients(&t.base, &t, 100, &mut SeededRng::new(seed)).unwrap();
        let c = sign_consistency(&samples).unwrap();
        let support = Mask::from_coords(64, 16, t.large_support.iter().copied()).unwrap();
        let avg = |m: &Mask| m.indices().map(|i| c.as_slice()[i]).sum::<f64>() / m.k() as f64;
        inside.push(avg(&support));
        outside.push(avg(&support.complement()));
    }
    assert!(mean(&inside) > mean(&outside), "{inside:?} vs {outside:?}");
}

#[test]
fn knockout_endpoints_are_trained_and_base_error() {
    let mut spec = TargetSpec::sparse(1);
    spec.heldout_size = 256;
    let t = make_task(&spec, &mut SeededRng::new(2)).unwrap();
    let mut trained = t.base.clone();
    trained.set_b(t.true_b.clone().unwrap()).unwrap();
    let scores = gaussian_fill(&mut SeededRng::new(3), 64, 16, 0.0, 1.0).unwrap().map(f64::abs);
    let curves = knockout_sweep(&trained, &scores, &[0.0, 1.0], &t, 42).unwrap();
    let trained_mse = t.heldout_relative_mse(&trained).unwrap();
    for c in [&curves.circuit, &curves.random] {
        assert_eq!(c[0].relative_mse, trained_mse);
        assert_eq!(c[1].relative_mse, 1.0);
    }
}

#[test]
fn adapter_updates_are_spectrally_confined_to_the_rank() {
    let mut rng = SeededRng::new(4);
    let m = AdaptedModel::new(
        gaussian_fill(&mut rng, 64, 128, 0.0, 0.1).unwrap(),
        gaussian_fill(&mut rng, 32, 64, 0.0, 0.1).unwrap(),
        gaussian_fill(&mut rng, 16, 128, 0.0, 0.1).unwrap(),
        1.0,
    )
    .unwrap()
    .with_b(gaussian_fill(&mut rng, 64, 16, 0.0, 1.0).unwrap())
    .unwrap();
    let delta = m.delta_w();
    assert_eq!(delta, matmul(&m.b, &m.a).unwrap());
    let a = svd_alignment(&delta, &m.w1, 16).unwrap();
    assert!((a.spectral_ratio - 1.0).abs() < 1e-9);
    assert!((0.0..=1.0 + 1e-12).contains(&a.left_align));
}

#[test]
fn random_circuits_do_not_track_the_support() {
    let t = task(TargetKind::SparseB, 0);
    let support: HashSet<(usize, usize)> = t.large_support.iter().copied().collect();
    let hits: usize = (0..200)
        .map(|i| {
            random_circuit(51, 64, 16, &mut SeededRng::new(i))
                .unwrap()
                .coords()
                .filter(|c| support.contains(c))
                .count()
        })
        .sum();
    let per_circuit = hits as f64 / 200.0;
    let expected = 51.0 * 51.0 / 1024.0;
    assert!((per_circuit - expected).abs() < 0.5, "{per_circuit} vs {expected}");
}
