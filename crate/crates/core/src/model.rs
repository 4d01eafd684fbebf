//! Two-layer ReLU MLP with a low-rank adapter on the first layer.
//!
//! `y = W2 · relu((W1 + scale · B·A) · x)`, no biases. `W1`, `W2` and `A` are
//! frozen unless full-LoRA training is requested; `B` starts at zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gemm_into, matmul, Matrix, Op};

/// Layer sizes of the adapted network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    pub rank: usize,
}

impl Dims {
    /// 128 → 64 → 32 with a rank-16 adapter (1 024 entries in `B`).
    pub const SYNTHETIC: Dims = Dims {
        input: 128,
        hidden: 64,
        output: 32,
        rank: 16,
    };

    pub fn b_entries(&self) -> usize {
        self.hidden * self.rank
    }
}

impl Default for Dims {
    fn default() -> Self {
        Dims::SYNTHETIC
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedModel {
    pub w1: Matrix,
    pub w2: Matrix,
    pub a: Matrix,
    pub b: Matrix,
    pub scale: f64,
}

/// Inputs as columns: `x` is `input x n`, `y` is `output x n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Matrix,
    pub y: Matrix,
}

impl Batch {
    pub fn new(x: Matrix, y: Matrix) -> Result<Self> {
        if x.cols() != y.cols() {
            return Err(Error::invalid(format!(
                "batch has {} inputs but {} targets",
                x.cols(),
                y.cols()
            )));
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.x.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.x.cols() == 0
    }
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub d_b: Matrix,
    /// Filled by [`AdaptedModel::backward`]; skipped on the B-only fast path.
    pub d_a: Option<Matrix>,
    pub loss: f64,
}

/// First-layer projections of a batch, `W1·x` and `A·x`. Reusable across
/// forward passes as long as `W1` and `A` do not change.
#[derive(Debug, Clone)]
pub struct Features {
    pub wx: Matrix,
    pub ax: Matrix,
}

/// Serialized model checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub dims: Dims,
    pub seed: u64,
    pub scale: f64,
    pub w1: Matrix,
    pub w2: Matrix,
    pub a: Matrix,
    pub b: Matrix,
}

impl AdaptedModel {
    /// A model with a zero adapter. Shapes are checked against each other.
    pub fn new(w1: Matrix, w2: Matrix, a: Matrix, scale: f64) -> Result<Self> {
        let (hidden, input) = w1.shape();
        if w2.cols() != hidden {
            return Err(Error::invalid(format!(
                "w2 is {:?} but w1 has {hidden} hidden units",
                w2.shape()
            )));
        }
        if a.cols() != input {
            return Err(Error::invalid(format!(
                "a is {:?} but inputs are {input}-dimensional",
                a.shape()
            )));
        }
        if !scale.is_finite() {
            return Err(Error::invalid("adapter scale must be finite"));
        }
        let b = Matrix::zeros(hidden, a.rows());
        Ok(Self { w1, w2, a, b, scale })
    }

    pub fn dims(&self) -> Dims {
        Dims {
            input: self.w1.cols(),
            hidden: self.w1.rows(),
            output: self.w2.rows(),
            rank: self.a.rows(),
        }
    }

    pub fn with_b(mut self, b: Matrix) -> Result<Self> {
        self.set_b(b)?;
        Ok(self)
    }

    pub fn set_b(&mut self, b: Matrix) -> Result<()> {
        if b.shape() != self.b.shape() {
            return Err(Error::invalid(format!(
                "b must be {:?}, got {:?}",
                self.b.shape(),
                b.shape()
            )));
        }
        self.b = b;
        Ok(())
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.rows() != self.w1.cols() {
            return Err(Error::invalid(format!(
                "input has {} rows, model expects {}",
                x.rows(),
                self.w1.cols()
            )));
        }
        Ok(())
    }

    pub fn features(&self, x: &Matrix) -> Result<Features> {
        self.check_input(x)?;
        Ok(Features {
            wx: matmul(&self.w1, x)?,
            ax: matmul(&self.a, x)?,
        })
    }

    /// Recomputes only `A·x`, keeping a previously computed `W1·x`.
    pub fn refresh_features(&self, x: &Matrix, wx: Matrix) -> Result<Features> {
        self.check_input(x)?;
        Ok(Features {
            wx,
            ax: matmul(&self.a, x)?,
        })
    }

    /// Pre-activations `W1·x + scale·B·(A·x)`.
    pub fn preactivation(&self, f: &Features) -> Result<Matrix> {
        let mut h = f.wx.clone();
        if !self.b.is_zero() {
            gemm_into(self.scale, &self.b, Op::N, &f.ax, Op::N, 1.0, &mut h)?;
        }
        Ok(h)
    }

    pub fn forward_features(&self, f: &Features) -> Result<Matrix> {
        let h = self.preactivation(f)?;
        matmul(&self.w2, &h.map(relu))
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.forward_features(&self.features(x)?)
    }

    /// `W1 + scale · B·A`.
    pub fn merge_effective_weight(&self) -> Matrix {
        let mut w = self.w1.clone();
        if !self.b.is_zero() {
            gemm_into(self.scale, &self.b, Op::N, &self.a, Op::N, 1.0, &mut w)
                .expect("shapes checked at construction");
        }
        w
    }

    /// `scale · B·A`, the adapter's contribution to the first layer.
    pub fn delta_w(&self) -> Matrix {
        let mut d = Matrix::zeros(self.w1.rows(), self.w1.cols());
        gemm_into(self.scale, &self.b, Op::N, &self.a, Op::N, 0.0, &mut d)
            .expect("shapes checked at construction");
        d
    }

    /// Analytic gradients of the mean squared error with respect to `B` and `A`.
    pub fn backward(&self, batch: &Batch) -> Result<Gradients> {
        let f = self.features(&batch.x)?;
        self.backward_features(&f, &batch.x, &batch.y, true)
    }

    /// Gradient computation from precomputed features. `x` is only read when
    /// `want_a` is set.
    pub fn backward_features(&self, f: &Features, x: &Matrix, y: &Matrix, want_a: bool) -> Result<Gradients> {
        let n = f.wx.cols();
        let out = self.w2.rows();
        if y.shape() != (out, n) {
            return Err(Error::invalid(format!(
                "targets are {:?}, expected ({out}, {n})",
                y.shape()
            )));
        }
        let h = self.preactivation(f)?;
        let z = h.map(relu);
        let pred = matmul(&self.w2, &z)?;
        let resid = pred.sub(y)?;
        let denom = (out * n) as f64;
        let loss = resid.frobenius_norm_sq() / denom;

        let dy = resid.scaled(2.0 / denom);
        let mut dh = Matrix::zeros(h.rows(), n);
        gemm_into(1.0, &self.w2, Op::T, &dy, Op::N, 0.0, &mut dh)?;
        for (g, &pre) in dh.as_mut_slice().iter_mut().zip(h.as_slice()) {
            if pre <= 0.0 {
                *g = 0.0;
            }
        }

        let mut d_b = Matrix::zeros(self.b.rows(), self.b.cols());
        gemm_into(self.scale, &dh, Op::N, &f.ax, Op::T, 0.0, &mut d_b)?;

        let d_a = if want_a {
            let mut d_a = Matrix::zeros(self.a.rows(), self.a.cols());
            if !self.b.is_zero() {
                let mut bt_dh = Matrix::zeros(self.b.cols(), n);
                gemm_into(1.0, &self.b, Op::T, &dh, Op::N, 0.0, &mut bt_dh)?;
                gemm_into(self.scale, &bt_dh, Op::N, x, Op::T, 0.0, &mut d_a)?;
            }
            Some(d_a)
        } else {
            None
        };

        Ok(Gradients { d_b, d_a, loss })
    }

    pub fn checkpoint(&self, seed: u64) -> Checkpoint {
        Checkpoint {
            dims: self.dims(),
            seed,
            scale: self.scale,
            w1: self.w1.clone(),
            w2: self.w2.clone(),
            a: self.a.clone(),
            b: self.b.clone(),
        }
    }

    pub fn from_checkpoint(c: Checkpoint) -> Result<Self> {
        let model = AdaptedModel::new(c.w1, c.w2, c.a, c.scale)?.with_b(c.b)?;
        if model.dims() != c.dims {
            return Err(Error::invalid(format!(
                "checkpoint dims {:?} disagree with its matrices {:?}",
                c.dims,
                model.dims()
            )));
        }
        Ok(model)
    }
}

#[inline]
pub(crate) fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// Mean over all entries of the squared difference.
pub fn mse_loss(pred: &Matrix, target: &Matrix) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::invalid(format!(
            "mse_loss: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    if pred.is_empty() {
        return Err(Error::invalid("mse_loss of empty matrices"));
    }
    let sum: f64 = pred
        .as_slice()
        .iter()
        .zip(target.as_slice())
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(sum / pred.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{kaiming_normal, SeededRng};

    pub(crate) fn small_model(rng: &mut SeededRng, dims: Dims) -> AdaptedModel {
        AdaptedModel::new(
            kaiming_normal(rng, dims.hidden, dims.input),
            kaiming_normal(rng, dims.output, dims.hidden),
            kaiming_normal(rng, dims.rank, dims.input),
            1.0,
        )
        .unwrap()
    }

    /// Independent scalar-loop forward pass.
    fn naive_forward(m: &AdaptedModel, x: &Matrix) -> Matrix {
        let d = m.dims();
        let mut y = Matrix::zeros(d.output, x.cols());
        for c in 0..x.cols() {
            let mut hidden = vec![0.0; d.hidden];
            for (i, hv) in hidden.iter_mut().enumerate() {
                let mut s = 0.0;
                for k in 0..d.input {
                    let mut w = m.w1[(i, k)];
                    for r in 0..d.rank {
                        w += m.scale * m.b[(i, r)] * m.a[(r, k)];
                    }
                    s += w * x[(k, c)];
                }
                *hv = s.max(0.0);
            }
            for o in 0..d.output {
                y[(o, c)] = (0..d.hidden).map(|i| m.w2[(o, i)] * hidden[i]).sum();
            }
        }
        y
    }

    #[test]
    fn zero_adapter_is_base_model() {
        let mut rng = SeededRng::new(1);
        let m = small_model(&mut rng, Dims::SYNTHETIC);
        let x = rng.gaussian_matrix(128, 5, 0.0, 1.0);
        let base = matmul(&m.w2, &matmul(&m.w1, &x).unwrap().map(relu)).unwrap();
        assert_eq!(m.forward(&x).unwrap(), base);
    }

    #[test]
    fn zero_input_zero_output() {
        let mut rng = SeededRng::new(2);
        let mut m = small_model(&mut rng, Dims::SYNTHETIC);
        m.b = rng.gaussian_matrix(64, 16, 0.0, 0.1);
        assert!(m.forward(&Matrix::zeros(128, 3)).unwrap().is_zero());
    }

    #[test]
    fn forward_matches_naive_loop() {
        let mut rng = SeededRng::new(3);
        let mut m = small_model(&mut rng, Dims::SYNTHETIC);
        m.b = rng.gaussian_matrix(64, 16, 0.0, 0.2);
        m.scale = 0.7;
        let x = rng.gaussian_matrix(128, 4, 0.0, 1.0);
        let diff = m.forward(&x).unwrap().sub(&naive_forward(&m, &x)).unwrap();
        assert!(diff.max_abs() < 1e-12);
    }

    #[test]
    fn wrong_input_width_rejected() {
        let mut rng = SeededRng::new(4);
        let m = small_model(&mut rng, Dims::SYNTHETIC);
        assert!(matches!(m.forward(&Matrix::zeros(127, 2)), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn mse_cases() {
        let p = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(mse_loss(&p, &p).unwrap(), 0.0);
        assert_eq!(mse_loss(&p.map(|v| v + 1.0), &p).unwrap(), 1.0);
        assert!(mse_loss(&p, &Matrix::zeros(2, 3)).is_err());

        let mut rng = SeededRng::new(5);
        let a = rng.gaussian_matrix(7, 9, 0.0, 1.0);
        let b = rng.gaussian_matrix(7, 9, 0.0, 1.0);
        let mut s = 0.0;
        for i in 0..7 {
            for j in 0..9 {
                s += (a[(i, j)] - b[(i, j)]).powi(2);
            }
        }
        assert!((mse_loss(&a, &b).unwrap() - s / 63.0).abs() < 1e-14);
    }

    #[test]
    fn zero_adapter_gives_zero_a_gradient() {
        let mut rng = SeededRng::new(6);
        let m = small_model(&mut rng, Dims::SYNTHETIC);
        let x = rng.gaussian_matrix(128, 8, 0.0, 1.0);
        let y = rng.gaussian_matrix(32, 8, 0.0, 1.0);
        let g = m.backward(&Batch::new(x, y).unwrap()).unwrap();
        assert!(g.d_a.unwrap().is_zero());
        assert!(!g.d_b.is_zero());
    }

    #[test]
    fn self_target_gives_zero_gradient() {
        let mut rng = SeededRng::new(7);
        let mut m = small_model(&mut rng, Dims::SYNTHETIC);
        m.b = rng.gaussian_matrix(64, 16, 0.0, 0.1);
        let x = rng.gaussian_matrix(128, 8, 0.0, 1.0);
        let y = m.forward(&x).unwrap();
        let g = m.backward(&Batch::new(x, y).unwrap()).unwrap();
        assert_eq!(g.loss, 0.0);
        assert!(g.d_b.is_zero());
    }

    #[test]
    fn merge_cases() {
        let mut rng = SeededRng::new(8);
        let mut m = small_model(&mut rng, Dims::SYNTHETIC);
        assert_eq!(m.merge_effective_weight(), m.w1);

        m.b = rng.gaussian_matrix(64, 16, 0.0, 0.3);
        let d1 = m.merge_effective_weight().sub(&m.w1).unwrap();
        m.scale = 2.0;
        let d2 = m.merge_effective_weight().sub(&m.w1).unwrap();
        assert!(d2.sub(&d1.scaled(2.0)).unwrap().max_abs() < 1e-12);

        m.scale = 1.0;
        let x = rng.gaussian_matrix(128, 6, 0.0, 1.0);
        let merged = matmul(&m.w2, &matmul(&m.merge_effective_weight(), &x).unwrap().map(relu)).unwrap();
        assert!(merged.sub(&m.forward(&x).unwrap()).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = SeededRng::new(9);
        let mut m = small_model(&mut rng, Dims { input: 5, hidden: 4, output: 3, rank: 2 });
        m.b = rng.gaussian_matrix(4, 2, 0.0, 1.0);
        let json = serde_json::to_string(&m.checkpoint(9)).unwrap();
        for key in ["\"dims\"", "\"seed\"", "\"scale\"", "\"w1\"", "\"w2\"", "\"a\"", "\"b\""] {
            assert!(json.contains(key));
        }
        let back = AdaptedModel::from_checkpoint(serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
