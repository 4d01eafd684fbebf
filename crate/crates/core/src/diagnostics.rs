//! Diagnostics that explain when placement matters.
//!
//! * signal retention of a mask on a gradient,
//! * structure of a gradient trace (effective rank, step-to-step cosine,
//!   accumulation efficiency),
//! * knockout sweeps on a trained adapter,
//! * per-entry gradient sign consistency,
//! * alignment of the adapter update with the base weight's spectrum.

use serde::{Deserialize, Serialize};

use crate::discovery::{select_top_k, Method};
use crate::error::{Error, Result};
use crate::linalg::{matmul_tn, Matrix};
use crate::mask::Mask;
use crate::model::AdaptedModel;
use crate::rng::SeededRng;
use crate::svd::svd;
use crate::task::TaskInstance;
use crate::training::{clip_and_noise, Regime, TrainConfig, NOISE_STREAM};

/// Seed of the random knockout baseline.
pub const KNOCKOUT_SEED: u64 = 42;

/// Knockout fractions: 0.1 % to 75 %.
pub const KNOCKOUT_FRACTIONS: [f64; 9] = [0.001, 0.01, 0.03, 0.05, 0.1, 0.2, 0.35, 0.5, 0.75];

/// `‖m ⊙ g‖² / ‖g‖²`
pub fn signal_retention(grad: &[f64], mask: &Mask) -> Result<f64> {
    if grad.len() != mask.len() {
        return Err(Error::invalid(format!(
            "gradient has {} entries, mask {}",
            grad.len(),
            mask.len()
        )));
    }
    let total: f64 = grad.iter().map(|g| g * g).sum();
    if total == 0.0 {
        return Err(Error::Undefined("signal retention of a zero gradient".into()));
    }
    let kept: f64 = mask.indices().map(|i| grad[i] * grad[i]).sum();
    Ok(kept / total)
}

/// Flattened gradient snapshots from one run, in step order.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientTrace {
    vectors: Vec<Vec<f64>>,
}

impl GradientTrace {
    pub fn new(vectors: Vec<Vec<f64>>) -> Result<Self> {
        if vectors.len() < 2 {
            return Err(Error::invalid(format!(
                "a gradient trace needs at least 2 snapshots, got {}",
                vectors.len()
            )));
        }
        let d = vectors[0].len();
        if d == 0 || vectors.iter().any(|v| v.len() != d) {
            return Err(Error::invalid("trace snapshots must share a non-zero length"));
        }
        Ok(Self { vectors })
    }

    pub fn steps(&self) -> usize {
        self.vectors.len()
    }

    pub fn dim(&self) -> usize {
        self.vectors[0].len()
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    /// `T x d` matrix with one snapshot per row.
    pub fn to_matrix(&self) -> Matrix {
        let data = self.vectors.iter().flatten().copied().collect();
        Matrix::from_vec(self.steps(), self.dim(), data).expect("uniform lengths checked")
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankEstimator {
    /// `(Σσ²)² / Σσ⁴`
    #[default]
    ParticipationRatio,
    /// `exp(H(p))` with `p_i = σ_i² / Σσ²`.
    Entropy,
}

/// Participation-ratio rank of the stacked snapshots.
pub fn effective_rank(trace: &GradientTrace) -> Result<f64> {
    effective_rank_with(trace, RankEstimator::ParticipationRatio)
}

pub fn effective_rank_with(trace: &GradientTrace, estimator: RankEstimator) -> Result<f64> {
    match estimator {
        RankEstimator::ParticipationRatio => {
            // σ_i² are the eigenvalues of the Gram matrix G = M·Mᵀ, so
            // Σσ² = tr G and Σσ⁴ = ‖G‖_F².
            let m = trace.to_matrix();
            let gram = crate::linalg::matmul_nt(&m, &m)?;
            let tr: f64 = (0..gram.rows()).map(|i| gram[(i, i)]).sum();
            let fro2 = gram.frobenius_norm_sq();
            if fro2 == 0.0 {
                return Err(Error::Undefined("effective rank of an all-zero trace".into()));
            }
            Ok(tr * tr / fro2)
        }
        RankEstimator::Entropy => {
            let s = svd(&trace.to_matrix())?.s;
            let total: f64 = s.iter().map(|v| v * v).sum();
            if total == 0.0 {
                return Err(Error::Undefined("effective rank of an all-zero trace".into()));
            }
            let h: f64 = s
                .iter()
                .map(|v| v * v / total)
                .filter(|&p| p > 0.0)
                .map(|p| -p * p.ln())
                .sum();
            Ok(h.exp())
        }
    }
}

/// Mean cosine similarity of consecutive snapshots. Pairs with a zero
/// vector are skipped.
pub fn mean_cosine(trace: &GradientTrace) -> Result<f64> {
    let cosines: Vec<f64> = trace
        .vectors
        .windows(2)
        .filter_map(|w| {
            let (na, nb) = (norm(&w[0]), norm(&w[1]));
            (na > 0.0 && nb > 0.0).then(|| dot(&w[0], &w[1]) / (na * nb))
        })
        .collect();
    if cosines.is_empty() {
        return Err(Error::Undefined("no consecutive pair of non-zero snapshots".into()));
    }
    Ok(cosines.iter().sum::<f64>() / cosines.len() as f64)
}

/// `‖Σ_t g_t‖ / Σ_t ‖g_t‖`
pub fn accumulation_efficiency(trace: &GradientTrace) -> Result<f64> {
    let mut sum = vec![0.0; trace.dim()];
    let mut norms = 0.0;
    for v in &trace.vectors {
        for (s, x) in sum.iter_mut().zip(v) {
            *s += x;
        }
        norms += norm(v);
    }
    if norms == 0.0 {
        return Err(Error::Undefined("accumulation efficiency of an all-zero trace".into()));
    }
    Ok(norm(&sum) / norms)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StructureReport {
    pub effective_rank: f64,
    pub mean_cosine: f64,
    pub accumulation_efficiency: f64,
}

pub fn structure_report(trace: &GradientTrace) -> Result<StructureReport> {
    Ok(StructureReport {
        effective_rank: effective_rank(trace)?,
        mean_cosine: mean_cosine(trace)?,
        accumulation_efficiency: accumulation_efficiency(trace)?,
    })
}

/// `count` stochastic `∇_B` samples at the zero-adapter point, drawn the way
/// `config`'s regime would draw them (its batch size, plus its gradient
/// noise in the noisy regime). No update is applied between samples.
pub fn init_gradient_trace(task: &TaskInstance, config: &TrainConfig, count: usize, rng: &mut SeededRng) -> Result<GradientTrace> {
    if !task.base.b.is_zero() {
        return Err(Error::Precondition("initial traces need B = 0".into()));
    }
    let mut noise = rng.stream(NOISE_STREAM);
    let vectors = (0..count)
        .map(|_| {
            let (b, f) = task.sample_with_features(config.batch, rng)?;
            let mut g = task.base.backward_features(&f, &b.x, &b.y, false)?.d_b;
            if config.regime == Regime::Noisy {
                g = clip_and_noise(&g, config.noise_std, f64::INFINITY, &mut noise)?;
            }
            Ok(g.into_vec())
        })
        .collect::<Result<Vec<_>>>()?;
    GradientTrace::new(vectors)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KnockoutPoint {
    pub fraction_zeroed: f64,
    pub relative_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnockoutCurves {
    pub circuit: Vec<KnockoutPoint>,
    pub random: Vec<KnockoutPoint>,
}

/// Number of entries zeroed at `fraction`: `⌈fraction · n⌉`.
pub fn knockout_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64).ceil() as usize).min(n)
}

/// Zeroes the top `⌈f·|B|⌉` entries of the trained `B` by `scores` (circuit
/// curve) or a random subset of the same size (random curve), and records
/// the held-out relative MSE. Random subsets are nested prefixes of one
/// permutation drawn from `random_seed`.
pub fn knockout_sweep(
    trained: &AdaptedModel,
    scores: &Matrix,
    fractions: &[f64],
    task: &TaskInstance,
    random_seed: u64,
) -> Result<KnockoutCurves> {
    if scores.shape() != trained.b.shape() {
        return Err(Error::invalid(format!(
            "scores {:?} do not match B {:?}",
            scores.shape(),
            trained.b.shape()
        )));
    }
    if let Some(f) = fractions.iter().find(|f| !(0.0..=1.0).contains(*f)) {
        return Err(Error::invalid(format!("knockout fraction {f} outside [0, 1]")));
    }
    let n = scores.len();
    let cols = scores.cols();
    let ranked: Vec<usize> = select_top_k(scores, n, Method::FHat)?
        .entries
        .iter()
        .map(|e| e.0 * cols + e.1)
        .collect();
    let shuffled = SeededRng::new(random_seed).sample_distinct(n, n);
    let features = task.heldout_features_for(trained)?;

    let eval = |order: &[usize], count: usize| -> Result<f64> {
        let mut m = trained.clone();
        for &i in &order[..count] {
            m.b.as_mut_slice()[i] = 0.0;
        }
        task.relative_mse_from_features(&m, &features)
    };
    let mut curves = KnockoutCurves {
        circuit: Vec::with_capacity(fractions.len()),
        random: Vec::with_capacity(fractions.len()),
    };
    for &f in fractions {
        let count = knockout_count(f, n);
        curves.circuit.push(KnockoutPoint {
            fraction_zeroed: f,
            relative_mse: eval(&ranked, count)?,
        });
        curves.random.push(KnockoutPoint {
            fraction_zeroed: f,
            relative_mse: eval(&shuffled, count)?,
        });
    }
    Ok(curves)
}

/// Per-entry fraction of samples whose gradient sign agrees with the
/// majority sign. Zero gradients count as agreeing.
pub fn sign_consistency(samples: &[Matrix]) -> Result<Matrix> {
    if samples.len() < 2 {
        return Err(Error::invalid("sign consistency needs at least 2 samples"));
    }
    let shape = samples[0].shape();
    if samples.iter().any(|s| s.shape() != shape) {
        return Err(Error::invalid("gradient samples differ in shape"));
    }
    let n = samples.len() as f64;
    let mut out = Matrix::zeros(shape.0, shape.1);
    for (i, o) in out.as_mut_slice().iter_mut().enumerate() {
        let (mut pos, mut neg) = (0usize, 0usize);
        for s in samples {
            let v = s.as_slice()[i];
            if v > 0.0 {
                pos += 1;
            } else if v < 0.0 {
                neg += 1;
            }
        }
        let zeros = samples.len() - pos - neg;
        *o = (pos.max(neg) + zeros) as f64 / n;
    }
    Ok(out)
}

/// `∇_B` for `n` single-example batches at the model's current adapter.
pub fn per_example_gradients(model: &AdaptedModel, task: &TaskInstance, n: usize, rng: &mut SeededRng) -> Result<Vec<Matrix>> {
    (0..n)
        .map(|_| {
            let (b, _) = task.sample_with_features(1, rng)?;
            let f = model.features(&b.x)?;
            Ok(model.backward_features(&f, &b.x, &b.y, false)?.d_b)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub left_align: f64,
    pub spectral_ratio: f64,
}

/// Left alignment `‖U_rᵀ·ΔW‖² / ‖ΔW‖²` against the top-`r` left singular
/// vectors of `w0`, and the share of `‖ΔW‖²` in the top-`r` singular values
/// of `ΔW`.
pub fn svd_alignment(delta_w: &Matrix, w0: &Matrix, r: usize) -> Result<Alignment> {
    if delta_w.shape() != w0.shape() {
        return Err(Error::invalid(format!(
            "ΔW {:?} and W0 {:?} differ in shape",
            delta_w.shape(),
            w0.shape()
        )));
    }
    let p = w0.rows().min(w0.cols());
    if r == 0 || r > p {
        return Err(Error::invalid(format!("r must be in 1..={p}, got {r}")));
    }
    let total = delta_w.frobenius_norm_sq();
    if total == 0.0 {
        return Err(Error::Undefined("alignment of a zero update".into()));
    }
    let base = svd(w0)?;
    let mut u_r = Matrix::zeros(w0.rows(), r);
    for i in 0..w0.rows() {
        for j in 0..r {
            u_r[(i, j)] = base.u[(i, j)];
        }
    }
    let projected = matmul_tn(&u_r, delta_w)?;
    let left_align = (projected.frobenius_norm_sq() / total).clamp(0.0, 1.0);

    let s = svd(delta_w)?.s;
    let s_total: f64 = s.iter().map(|v| v * v).sum();
    let top: f64 = s.iter().take(r).map(|v| v * v).sum();
    Ok(Alignment {
        left_align,
        spectral_ratio: (top / s_total).clamp(0.0, 1.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::matmul;

    fn trace(v: Vec<Vec<f64>>) -> GradientTrace {
        GradientTrace::new(v).unwrap()
    }

    #[test]
    fn retention_cases() {
        let m = Mask::from_indices(1, 4, [1, 3]).unwrap();
        assert_eq!(signal_retention(&[1.0; 4], &m).unwrap(), 0.5);
        let top = Mask::from_indices(1, 4, [0]).unwrap();
        assert_eq!(signal_retention(&[3.0, 0.0, 0.0, 0.0], &top).unwrap(), 1.0);
        assert!(matches!(signal_retention(&[0.0; 4], &m), Err(Error::Undefined(_))));
    }

    #[test]
    fn structure_of_constant_trace() {
        let t = trace(vec![vec![1.0, 2.0, -1.0]; 5]);
        assert!((effective_rank(&t).unwrap() - 1.0).abs() < 1e-12);
        assert!((mean_cosine(&t).unwrap() - 1.0).abs() < 1e-12);
        assert!((accumulation_efficiency(&t).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_and_alternating_traces() {
        let eye: Vec<Vec<f64>> = (0..4)
            .map(|i| (0..6).map(|j| if i == j { 2.0 } else { 0.0 }).collect())
            .collect();
        assert!((effective_rank(&trace(eye.clone())).unwrap() - 4.0).abs() < 1e-12);
        assert!((effective_rank_with(&trace(eye), RankEstimator::Entropy).unwrap() - 4.0).abs() < 1e-9);

        let alt = trace(vec![vec![1.0, -2.0], vec![-1.0, 2.0], vec![1.0, -2.0]]);
        assert!((mean_cosine(&alt).unwrap() + 1.0).abs() < 1e-12);
        let pair = trace(vec![vec![1.0, -2.0], vec![-1.0, 2.0]]);
        assert_eq!(accumulation_efficiency(&pair).unwrap(), 0.0);
    }

    #[test]
    fn degenerate_traces() {
        assert!(GradientTrace::new(vec![vec![1.0]]).is_err());
        let zeros = trace(vec![vec![0.0; 3]; 3]);
        assert!(effective_rank(&zeros).is_err());
        assert!(mean_cosine(&zeros).is_err());
        assert!(accumulation_efficiency(&zeros).is_err());
    }

    #[test]
    fn participation_ratio_matches_svd_route() {
        let mut rng = SeededRng::new(17);
        let m = rng.normal_matrix(12, 40, 0.0, 1.0);
        let t = trace(m.row_iter().map(|r| r.to_vec()).collect());
        let s = svd(&m).unwrap().s;
        let s2: f64 = s.iter().map(|v| v * v).sum();
        let s4: f64 = s.iter().map(|v| v.powi(4)).sum();
        assert!((effective_rank(&t).unwrap() - s2 * s2 / s4).abs() < 1e-9);
    }

    #[test]
    fn sign_consistency_cases() {
        let p = Matrix::from_rows(&[[1.0, 1.0]]).unwrap();
        let n = Matrix::from_rows(&[[2.0, -1.0]]).unwrap();
        let c = sign_consistency(&[p.clone(), n.clone()]).unwrap();
        assert_eq!(c.as_slice(), &[1.0, 0.5]);
        let z = Matrix::from_rows(&[[0.0, 0.0]]).unwrap();
        let c = sign_consistency(&[p, n, z]).unwrap();
        assert_eq!(c[(0, 1)], 2.0 / 3.0);
        assert!(sign_consistency(&[Matrix::zeros(1, 1)]).is_err());
    }

    #[test]
    fn alignment_cases() {
        let mut rng = SeededRng::new(21);
        let w0 = rng.normal_matrix(8, 12, 0.0, 1.0);
        let base = svd(&w0).unwrap();
        let u1 = Matrix::from_vec(8, 1, base.u.column(0)).unwrap();
        let v1 = Matrix::from_vec(1, 12, base.vt.row(0).to_vec()).unwrap();
        let top = matmul(&u1, &v1).unwrap().scaled(base.s[0]);
        let a = svd_alignment(&top, &w0, 1).unwrap();
        assert!((a.left_align - 1.0).abs() < 1e-10);
        assert!((a.spectral_ratio - 1.0).abs() < 1e-10);

        // last left singular vector is orthogonal to the top-3 span
        let u_last = Matrix::from_vec(8, 1, base.u.column(7)).unwrap();
        let ortho = matmul(&u_last, &v1).unwrap();
        assert!(svd_alignment(&ortho, &w0, 3).unwrap().left_align < 1e-12);

        assert!(svd_alignment(&Matrix::zeros(8, 12), &w0, 1).is_err());
        assert!(svd_alignment(&top, &w0, 9).is_err());
    }

    #[test]
    fn knockout_count_rounds_up() {
        assert_eq!(knockout_count(0.001, 1024), 2);
        assert_eq!(knockout_count(0.0, 1024), 0);
        assert_eq!(knockout_count(1.0, 1024), 1024);
        assert_eq!(knockout_count(0.5, 1024), 512);
    }
}
