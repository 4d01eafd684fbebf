//! Property tests for scoring, selection, masks and retention.

use std::collections::HashSet;

use circuit_seed::diagnostics::signal_retention;
use circuit_seed::discovery::{overlap, random_circuit, score, select_top_k, GradStats, Method};
use circuit_seed::linalg::Matrix;
use circuit_seed::mask::Mask;
use circuit_seed::model::AdaptedModel;
use circuit_seed::rng::{gaussian_fill, kaiming_normal, SeededRng};
use proptest::prelude::*;

fn all_subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    (0u32..1 << n)
        .filter(|m| m.count_ones() as usize == k)
        .map(|m| (0..n).filter(|i| m >> i & 1 == 1).collect())
        .collect()
}

fn any_model(rows: usize, cols: usize) -> AdaptedModel {
    let mut rng = SeededRng::new(5);
    AdaptedModel::new(
        kaiming_normal(&mut rng, rows, 6),
        kaiming_normal(&mut rng, 2, rows),
        kaiming_normal(&mut rng, cols, 6),
        1.0,
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fisher_dominates_squared_mean(seed in any::<u64>(), n in 1usize..40, spread in 0.0f64..10.0) {
        let mut rng = SeededRng::new(seed);
        let offset = gaussian_fill(&mut rng, 3, 4, 0.0, 1.0).unwrap();
        let samples: Vec<Matrix> = (0..n)
            .map(|_| {
                let mut g = gaussian_fill(&mut rng, 3, 4, 0.0, spread).unwrap();
                g.axpy(1.0, &offset).unwrap();
                g
            })
            .collect();
        let stats = GradStats::from_samples(&samples).unwrap();
        let m = any_model(3, 4);
        let f = score(&stats, Method::FHat, &m).unwrap();
        let s = score(&stats, Method::SHat, &m).unwrap();
        let var = stats.variance();
        for i in 0..12 {
            let (fv, sv, vv) = (f.as_slice()[i], s.as_slice()[i], var.as_slice()[i]);
            prop_assert!(fv - sv * sv >= -1e-12 * fv.max(1.0));
            prop_assert!((fv - (sv * sv + vv)).abs() <= 1e-10 * fv.max(1.0));
            let s2 = stats.sum_g2.as_slice()[i];
            let s1 = stats.sum_g.as_slice()[i];
            prop_assert!(s2 >= s1 * s1 / n as f64 - 1e-12 * s2.max(1.0));
        }
    }

    #[test]
    fn top_k_is_optimal_on_4x4_grids(values in prop::collection::vec(0u8..6, 16)) {
        // small integer scores produce plenty of ties
        let scores = Matrix::from_vec(4, 4, values.iter().map(|&v| v as f64).collect()).unwrap();
        for k in 0..=16 {
            let c = select_top_k(&scores, k, Method::SHat).unwrap();
            let picked: f64 = c.entries.iter().map(|e| e.score()).sum();
            let best = all_subsets(16, k)
                .iter()
                .map(|s| s.iter().map(|&i| scores.as_slice()[i]).sum::<f64>())
                .fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(picked, if k == 0 { 0.0 } else { best });
            prop_assert_eq!(c.entries.len(), k);
            c.validate(4, 4).unwrap();
            // ties resolve to the smallest (row, col)
            for w in c.entries.windows(2) {
                prop_assert!(w[0].score() > w[1].score() || (w[0].row(), w[0].col()) < (w[1].row(), w[1].col()));
            }
        }
    }

    #[test]
    fn top_k_matches_full_sort_for_distinct_scores(seed in any::<u64>(), k in 0usize..=40) {
        let mut rng = SeededRng::new(seed);
        let scores = gaussian_fill(&mut rng, 8, 5, 0.0, 1.0).unwrap().map(f64::abs);
        let mut order: Vec<usize> = (0..40).collect();
        order.sort_by(|&a, &b| scores.as_slice()[b].total_cmp(&scores.as_slice()[a]));
        let c = select_top_k(&scores, k, Method::FHat).unwrap();
        let got: Vec<usize> = c.entries.iter().map(|e| e.row() * 5 + e.col()).collect();
        prop_assert_eq!(got, order[..k].to_vec());
    }

    #[test]
    fn top_k_retention_is_maximal_at_d8(g in prop::collection::vec(-5.0f64..5.0, 8)) {
        prop_assume!(g.iter().any(|v| *v != 0.0));
        let grad = Matrix::from_vec(2, 4, g.clone()).unwrap();
        for k in 0..=8 {
            let c = select_top_k(&grad.map(f64::abs), k, Method::SHat).unwrap();
            let rho = signal_retention(&g, &c.to_mask(2, 4).unwrap()).unwrap();
            let best = all_subsets(8, k)
                .iter()
                .map(|s| signal_retention(&g, &Mask::from_indices(2, 4, s.iter().copied()).unwrap()).unwrap())
                .fold(f64::NEG_INFINITY, f64::max);
            prop_assert!((rho - best).abs() <= 1e-12, "k={} rho={} best={}", k, rho, best);
        }
    }

    #[test]
    fn masks_round_trip_through_circuits(seed in any::<u64>(), k in 0usize..=64) {
        let c = random_circuit(k, 8, 8, &mut SeededRng::new(seed)).unwrap();
        let m = c.to_mask(8, 8).unwrap();
        prop_assert_eq!(m.k(), k);
        let coords: HashSet<(usize, usize)> = c.coords().collect();
        for r in 0..8 {
            for col in 0..8 {
                prop_assert_eq!(m.get(r, col), coords.contains(&(r, col)));
            }
        }
        prop_assert_eq!(m.complement().k(), 64 - k);
    }
}

#[test]
fn random_mask_retention_has_expectation_k_over_d() {
    let (d, k) = (1024, 51);
    let mut rng = SeededRng::new(99);
    let g = gaussian_fill(&mut rng, 64, 16, 0.0, 1.0).unwrap().map(|v| v * v * v);
    let trials = 10_000;
    let mean: f64 = (0..trials)
        .map(|_| {
            let m = random_circuit(k, 64, 16, &mut rng).unwrap().to_mask(64, 16).unwrap();
            signal_retention(g.as_slice(), &m).unwrap()
        })
        .sum::<f64>()
        / trials as f64;
    assert!((mean - k as f64 / d as f64).abs() <= 0.01, "mean retention {mean}");
}

#[test]
fn independent_random_circuits_share_k_squared_over_d_entries() {
    let k = 102;
    let mut rng = SeededRng::new(3);
    let pairs = 1000;
    let shared: f64 = (0..pairs)
        .map(|_| {
            let a = random_circuit(k, 64, 16, &mut rng).unwrap();
            let b = random_circuit(k, 64, 16, &mut rng).unwrap();
            overlap(&a, &b).unwrap() * k as f64
        })
        .sum::<f64>()
        / pairs as f64;
    let expected = (k * k) as f64 / 1024.0;
    assert!((shared - expected).abs() <= 0.15 * expected, "mean shared {shared} vs {expected}");
}

#[test]
fn identical_inputs_give_identical_circuits() {
    use circuit_seed::discovery::{discover, DiscoveryConfig};
    use circuit_seed::task::{make_task, TargetSpec};
    let mut spec = TargetSpec::sparse(4);
    spec.heldout_size = 16;
    let task = make_task(&spec, &mut SeededRng::new(8)).unwrap();
    for method in [Method::SHat, Method::FHat, Method::Magnitude, Method::Wanda, Method::Random] {
        let mut cfg = DiscoveryConfig::new(method, 51, 17);
        cfg.n_passes = 5;
        let a = discover(&task.base, &task, &cfg).unwrap().0;
        let b = discover(&task.base, &task, &cfg).unwrap().0;
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }
}

#[test]
fn adapter_contribution_is_linear_in_scale() {
    let mut rng = SeededRng::new(21);
    let mut m = any_model(5, 3);
    m.set_b(gaussian_fill(&mut rng, 5, 3, 0.0, 1.0).unwrap()).unwrap();
    let x = gaussian_fill(&mut rng, 6, 4, 0.0, 1.0).unwrap();
    let base = circuit_seed::linalg::matmul(&m.w1, &x).unwrap();
    let delta = |s: f64| {
        let mut c = m.clone();
        c.scale = s;
        c.preactivation(&c.features(&x).unwrap()).unwrap().sub(&base).unwrap()
    };
    let one = delta(1.0);
    for s in [0.0, 0.5, 2.0, -3.0] {
        let diff = delta(s).sub(&one.scaled(s)).unwrap().max_abs();
        assert!(diff < 1e-12, "scale {s}: {diff}");
    }
}
