//! Synthetic teacher/student regression tasks.
//!
//! The student is a freshly initialized [`AdaptedModel`] with `B = 0`. The
//! teacher shares its `W1`, `W2` and `A` and differs only in the first layer:
//!
//! * `DenseRank2`: `W1 + U·V` with `U` of width `residual_rank` and `V` lying
//!   in the row space of `A`, so every entry of `B` carries some signal.
//! * `SparseB`: `W1 + B*·A` where a small fraction of `B*` is large and the
//!   rest is near zero, so the signal is concentrated on a few entries.
//!
//! In both cases the teacher is reachable by the adapter: the residual is
//! exactly `true_b · A`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gemm_into, matmul, Matrix, Op};
use crate::model::{mse_loss, AdaptedModel, Batch, Dims, Features};
use crate::rng::{kaiming_normal, SeededRng};

pub const HELDOUT_SIZE: usize = 4096;

const TARGET_STREAM: u64 = 1;
const HELDOUT_STREAM: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    DenseRank2,
    SparseB,
}

impl TargetKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TargetKind::DenseRank2 => "dense_rank2",
            TargetKind::SparseB => "sparse_b",
        }
    }
}

impl std::str::FromStr for TargetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense_rank2" | "dense" => Ok(TargetKind::DenseRank2),
            "sparse_b" | "sparse" => Ok(TargetKind::SparseB),
            other => Err(Error::invalid(format!("unknown target kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub kind: TargetKind,
    pub dims: Dims,
    pub residual_rank: usize,
    /// Std of the entries of both residual factors (dense kind).
    pub residual_factor_std: f64,
    pub sparse_fraction: f64,
    pub large_std: f64,
    pub small_std: f64,
    pub heldout_size: usize,
    /// Seeds the teacher residual and the held-out set. The student's base
    /// weights come from the generator passed to [`make_task`].
    pub seed: u64,
}

impl TargetSpec {
    pub fn dense(seed: u64) -> Self {
        Self {
            kind: TargetKind::DenseRank2,
            ..Self::sparse(seed)
        }
    }

    pub fn sparse(seed: u64) -> Self {
        Self {
            kind: TargetKind::SparseB,
            dims: Dims::SYNTHETIC,
            residual_rank: 2,
            residual_factor_std: 0.25,
            sparse_fraction: 0.05,
            large_std: 0.3,
            small_std: 0.01,
            heldout_size: HELDOUT_SIZE,
            seed,
        }
    }

    pub fn of_kind(kind: TargetKind, seed: u64) -> Self {
        match kind {
            TargetKind::DenseRank2 => Self::dense(seed),
            TargetKind::SparseB => Self::sparse(seed),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sparse_fraction > 0.0 && self.sparse_fraction < 1.0) {
            return Err(Error::invalid(format!(
                "sparse_fraction must be in (0, 1), got {}",
                self.sparse_fraction
            )));
        }
        for (name, v) in [
            ("large_std", self.large_std),
            ("small_std", self.small_std),
            ("residual_factor_std", self.residual_factor_std),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.residual_rank == 0 {
            return Err(Error::invalid("residual_rank must be >= 1"));
        }
        if self.heldout_size == 0 {
            return Err(Error::invalid("heldout_size must be >= 1"));
        }
        Ok(())
    }

    /// Number of large entries of `B*`: `round(fraction * |B|)`.
    pub fn large_count(&self) -> usize {
        (self.sparse_fraction * self.dims.b_entries() as f64).round() as usize
    }
}

#[derive(Debug, Clone)]
pub struct TaskInstance {
    pub spec: TargetSpec,
    pub base: AdaptedModel,
    pub target_effective_w1: Matrix,
    /// Adapter value that reproduces the teacher exactly.
    pub true_b: Option<Matrix>,
    /// Coordinates of the large entries of `B*` (sparse kind), row-major order.
    pub large_support: Vec<(usize, usize)>,
    pub baseline_mse: f64,
    pub heldout: Batch,
    heldout_features: Features,
}

/// Builds the base model from `rng` and the teacher from `spec.seed`.
pub fn make_task(spec: &TargetSpec, rng: &mut SeededRng) -> Result<TaskInstance> {
    spec.validate()?;
    let d = spec.dims;
    let w1 = kaiming_normal(rng, d.hidden, d.input);
    let w2 = kaiming_normal(rng, d.output, d.hidden);
    let a = kaiming_normal(rng, d.rank, d.input);
    let base = AdaptedModel::new(w1, w2, a, 1.0)?;

    let mut trng = SeededRng::with_stream(spec.seed, TARGET_STREAM);
    let (true_b, large_support) = match spec.kind {
        TargetKind::SparseB => {
            let mut b = trng.normal_matrix(d.hidden, d.rank, 0.0, spec.small_std);
            let mut coords = trng.sample_distinct(d.b_entries(), spec.large_count());
            for &idx in &coords {
                b.as_mut_slice()[idx] = spec.large_std * trng.standard_normal();
            }
            coords.sort_unstable();
            let support = coords.into_iter().map(|i| (i / d.rank, i % d.rank)).collect();
            (b, support)
        }
        TargetKind::DenseRank2 => {
            let u = trng.normal_matrix(d.hidden, spec.residual_rank, 0.0, spec.residual_factor_std);
            let v = trng.normal_matrix(spec.residual_rank, d.rank, 0.0, spec.residual_factor_std);
            (matmul(&u, &v)?, Vec::new())
        }
    };
    let mut target_effective_w1 = base.w1.clone();
    gemm_into(1.0, &true_b, Op::N, &base.a, Op::N, 1.0, &mut target_effective_w1)?;

    let mut hrng = SeededRng::with_stream(spec.seed, HELDOUT_STREAM);
    let x = hrng.normal_matrix(d.input, spec.heldout_size, 0.0, 1.0);
    let heldout_features = base.features(&x)?;
    let y = teacher_output(&base, &true_b, &heldout_features)?;
    let heldout = Batch::new(x, y)?;
    let baseline_mse = mse_loss(&base.forward_features(&heldout_features)?, &heldout.y)?;

    Ok(TaskInstance {
        spec: spec.clone(),
        base,
        target_effective_w1,
        true_b: Some(true_b),
        large_support,
        baseline_mse,
        heldout,
        heldout_features,
    })
}

/// `W2 · relu(W1·x + true_b·(A·x))`, evaluated from base-model features.
fn teacher_output(base: &AdaptedModel, true_b: &Matrix, f: &Features) -> Result<Matrix> {
    let mut h = f.wx.clone();
    gemm_into(1.0, true_b, Op::N, &f.ax, Op::N, 1.0, &mut h)?;
    matmul(&base.w2, &h.map(crate::model::relu))
}

impl TaskInstance {
    pub fn dims(&self) -> Dims {
        self.spec.dims
    }

    /// `x ~ N(0, I)` columns and their teacher outputs, together with the base
    /// model's features for the same inputs.
    pub fn sample_with_features(&self, batch: usize, rng: &mut SeededRng) -> Result<(Batch, Features)> {
        if batch == 0 {
            return Err(Error::invalid("batch size must be >= 1"));
        }
        let x = rng.normal_matrix(self.dims().input, batch, 0.0, 1.0);
        let f = self.base.features(&x)?;
        let true_b = self.true_b.as_ref().expect("teacher adapter is always built");
        let y = teacher_output(&self.base, true_b, &f)?;
        Ok((Batch::new(x, y)?, f))
    }

    pub fn sample_batch(&self, batch: usize, rng: &mut SeededRng) -> Result<Batch> {
        Ok(self.sample_with_features(batch, rng)?.0)
    }

    fn shares_first_layer(&self, model: &AdaptedModel) -> bool {
        model.w1 == self.base.w1 && model.a == self.base.a
    }

    /// Relative MSE on the task's own held-out set, reusing cached features
    /// when the model's `W1` and `A` are the base ones.
    pub fn heldout_relative_mse(&self, model: &AdaptedModel) -> Result<f64> {
        if self.baseline_mse == 0.0 {
            return Err(Error::DegenerateTask);
        }
        let pred = if self.shares_first_layer(model) {
            model.forward_features(&self.heldout_features)?
        } else {
            model.forward(&self.heldout.x)?
        };
        Ok(mse_loss(&pred, &self.heldout.y)? / self.baseline_mse)
    }

    /// Held-out features under `model`'s first layer.
    pub fn heldout_features_for(&self, model: &AdaptedModel) -> Result<Features> {
        if self.shares_first_layer(model) {
            Ok(self.heldout_features.clone())
        } else if model.w1 == self.base.w1 {
            model.refresh_features(&self.heldout.x, self.heldout_features.wx.clone())
        } else {
            model.features(&self.heldout.x)
        }
    }

    /// Relative held-out MSE from features produced by
    /// [`heldout_features_for`](Self::heldout_features_for) for the same
    /// first layer.
    pub fn relative_mse_from_features(&self, model: &AdaptedModel, f: &Features) -> Result<f64> {
        if self.baseline_mse == 0.0 {
            return Err(Error::DegenerateTask);
        }
        Ok(mse_loss(&model.forward_features(f)?, &self.heldout.y)? / self.baseline_mse)
    }

    pub fn manifest(&self) -> TaskManifest {
        TaskManifest {
            schema_version: crate::SCHEMA_VERSION,
            kind: self.spec.kind,
            seed: self.spec.seed,
            dims: self.spec.dims,
            baseline_mse: self.baseline_mse,
            heldout_size: self.spec.heldout_size,
            residual_rank: self.spec.residual_rank,
            residual_factor_std: self.spec.residual_factor_std,
            sparse_fraction: self.spec.sparse_fraction,
            large_std: self.spec.large_std,
            small_std: self.spec.small_std,
            large_count: match self.spec.kind {
                TargetKind::SparseB => Some(self.large_support.len()),
                TargetKind::DenseRank2 => None,
            },
        }
    }
}

/// MSE of `model` on `eval_set`, divided by the task's baseline MSE.
pub fn relative_mse(task: &TaskInstance, model: &AdaptedModel, eval_set: &Batch) -> Result<f64> {
    if task.baseline_mse == 0.0 {
        return Err(Error::DegenerateTask);
    }
    if std::ptr::eq(eval_set, &task.heldout) {
        return task.heldout_relative_mse(model);
    }
    Ok(mse_loss(&model.forward(&eval_set.x)?, &eval_set.y)? / task.baseline_mse)
}

/// Provenance record written next to every run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskManifest {
    pub schema_version: u32,
    pub kind: TargetKind,
    pub seed: u64,
    pub dims: Dims,
    pub baseline_mse: f64,
    pub heldout_size: usize,
    pub residual_rank: usize,
    pub residual_factor_std: f64,
    pub sparse_fraction: f64,
    pub large_std: f64,
    pub small_std: f64,
    pub large_count: Option<usize>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::svd::svd;

    fn small_spec(kind: TargetKind, seed: u64) -> TargetSpec {
        TargetSpec {
            heldout_size: 512,
            ..TargetSpec::of_kind(kind, seed)
        }
    }

    #[test]
    fn sparse_target_has_51_large_entries() {
        let spec = small_spec(TargetKind::SparseB, 3);
        assert_eq!(spec.large_count(), 51);
        let task = make_task(&spec, &mut SeededRng::new(3)).unwrap();
        assert_eq!(task.large_support.len(), 51);
        let b = task.true_b.as_ref().unwrap();
        // small entries are 0.01-std; a 10-sigma threshold separates them
        let big = b.as_slice().iter().filter(|v| v.abs() > 0.1).count();
        assert!(big <= 51);
        let reconstructed = task.base.w1.add(&matmul(b, &task.base.a).unwrap()).unwrap();
        assert!(reconstructed.sub(&task.target_effective_w1).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn dense_residual_is_rank_two() {
        let task = make_task(&small_spec(TargetKind::DenseRank2, 4), &mut SeededRng::new(4)).unwrap();
        let delta = task.target_effective_w1.sub(&task.base.w1).unwrap();
        let s = svd(&delta).unwrap().s;
        assert!(s[1] > 1e-6);
        assert!(s[2..].iter().all(|&v| v < 1e-10), "{:?}", &s[..4]);
    }

    #[test]
    fn baseline_positive_and_anchor_is_one() {
        for seed in 0..10 {
            for kind in [TargetKind::SparseB, TargetKind::DenseRank2] {
                let task = make_task(&small_spec(kind, seed), &mut SeededRng::new(seed)).unwrap();
                assert!(task.baseline_mse > 0.0);
                let r = relative_mse(&task, &task.base, &task.heldout).unwrap();
                assert_eq!(r, 1.0);
                // the uncached path gives the same bits
                let fresh = Batch::new(task.heldout.x.clone(), task.heldout.y.clone()).unwrap();
                assert_eq!(relative_mse(&task, &task.base, &fresh).unwrap(), 1.0);
            }
        }
    }

    #[test]
    fn true_b_recovers_teacher() {
        let task = make_task(&small_spec(TargetKind::SparseB, 5), &mut SeededRng::new(5)).unwrap();
        let m = task.base.clone().with_b(task.true_b.clone().unwrap()).unwrap();
        assert!(task.heldout_relative_mse(&m).unwrap() < 1e-6);
    }

    #[test]
    fn batches_shapes_and_determinism() {
        let task = make_task(&small_spec(TargetKind::SparseB, 6), &mut SeededRng::new(6)).unwrap();
        let b1 = task.sample_batch(1, &mut SeededRng::new(10)).unwrap();
        assert_eq!(b1.x.shape(), (128, 1));
        assert_eq!(b1.y.shape(), (32, 1));
        let b2 = task.sample_batch(1, &mut SeededRng::new(10)).unwrap();
        assert_eq!(b1, b2);
        assert!(task.sample_batch(0, &mut SeededRng::new(10)).is_err());
    }

    #[test]
    fn teacher_output_matches_loop() {
        let task = make_task(&small_spec(TargetKind::SparseB, 7), &mut SeededRng::new(7)).unwrap();
        let batch = task.sample_batch(3, &mut SeededRng::new(1)).unwrap();
        let w = &task.target_effective_w1;
        for c in 0..3 {
            let hidden: Vec<f64> = (0..64)
                .map(|i| (0..128).map(|k| w[(i, k)] * batch.x[(k, c)]).sum::<f64>().max(0.0))
                .collect();
            for o in 0..32 {
                let y: f64 = (0..64).map(|i| task.base.w2[(o, i)] * hidden[i]).sum();
                assert!((y - batch.y[(o, c)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn invalid_spec_rejected() {
        let mut spec = TargetSpec::sparse(0);
        spec.sparse_fraction = 1.0;
        assert!(make_task(&spec, &mut SeededRng::new(0)).is_err());
        spec.sparse_fraction = 0.05;
        spec.large_std = -1.0;
        assert!(make_task(&spec, &mut SeededRng::new(0)).is_err());
    }
}
