//! Analytic adapter gradients against central finite differences.

use circuit_seed::linalg::Matrix;
use circuit_seed::model::{mse_loss, AdaptedModel, Batch, Dims};
use circuit_seed::rng::{gaussian_fill, kaiming_normal, SeededRng};

const H: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;

fn loss(m: &AdaptedModel, batch: &Batch) -> f64 {
    mse_loss(&m.forward(&batch.x).unwrap(), &batch.y).unwrap()
}

/// A random instance whose hidden pre-activations all sit well away from
/// the ReLU kink, so a step of size `H` cannot cross it.
fn instance(rng: &mut SeededRng) -> (AdaptedModel, Batch) {
    loop {
        let dims = Dims {
            input: 3 + rng.below(6),
            hidden: 3 + rng.below(6),
            output: 1 + rng.below(4),
            rank: 1 + rng.below(3),
        };
        let n = 1 + rng.below(5);
        let mut m = AdaptedModel::new(
            kaiming_normal(rng, dims.hidden, dims.input),
            kaiming_normal(rng, dims.output, dims.hidden),
            kaiming_normal(rng, dims.rank, dims.input),
            0.5 + rng.uniform(),
        )
        .unwrap();
        m.set_b(gaussian_fill(rng, dims.hidden, dims.rank, 0.0, 0.5).unwrap()).unwrap();
        let x = gaussian_fill(rng, dims.input, n, 0.0, 1.0).unwrap();
        let y = gaussian_fill(rng, dims.output, n, 0.0, 1.0).unwrap();
        let pre = m.preactivation(&m.features(&x).unwrap()).unwrap();
        if pre.as_slice().iter().all(|v| v.abs() > 1e-3) {
            return (m, Batch::new(x, y).unwrap());
        }
    }
}

fn assert_close(analytic: &Matrix, numeric: &Matrix, what: &str) {
    let scale = analytic.max_abs().max(numeric.max_abs());
    for (i, (a, n)) in analytic.as_slice().iter().zip(numeric.as_slice()).enumerate() {
        let denom = a.abs().max(n.abs()).max(1e-3 * scale).max(1e-12);
        assert!((a - n).abs() / denom <= REL_TOL, "{what}[{i}]: analytic {a} vs numeric {n}");
    }
}

fn central_difference(m: &AdaptedModel, batch: &Batch, factor_b: bool) -> Matrix {
    let target = if factor_b { &m.b } else { &m.a };
    let mut out = Matrix::zeros(target.rows(), target.cols());
    for i in 0..target.len() {
        let mut plus = m.clone();
        let mut minus = m.clone();
        if factor_b {
            plus.b.as_mut_slice()[i] += H;
            minus.b.as_mut_slice()[i] -= H;
        } else {
            plus.a.as_mut_slice()[i] += H;
            minus.a.as_mut_slice()[i] -= H;
        }
        out.as_mut_slice()[i] = (loss(&plus, batch) - loss(&minus, batch)) / (2.0 * H);
    }
    out
}

#[test]
fn b_and_a_gradients_match_finite_differences_on_50_instances() {
    let mut rng = SeededRng::new(2024);
    for _ in 0..50 {
        let (m, batch) = instance(&mut rng);
        let g = m.backward(&batch).unwrap();
        assert!((g.loss - loss(&m, &batch)).abs() < 1e-12);
        assert_close(&g.d_b, &central_difference(&m, &batch, true), "d_b");
        assert_close(g.d_a.as_ref().unwrap(), &central_difference(&m, &batch, false), "d_a");
    }
}

#[test]
fn a_gradient_is_exactly_zero_at_zero_adapter() {
    let mut rng = SeededRng::new(7);
    for _ in 0..50 {
        let (mut m, batch) = instance(&mut rng);
        let (r, c) = m.b.shape();
        m.set_b(Matrix::zeros(r, c)).unwrap();
        let g = m.backward(&batch).unwrap();
        assert!(g.d_a.unwrap().as_slice().iter().all(|&v| v == 0.0));
        assert!(!g.d_b.is_zero(), "B still receives signal at B = 0");
    }
}
