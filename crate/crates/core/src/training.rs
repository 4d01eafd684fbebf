//! Masked adapter training in two regimes.
//!
//! * clean: Adam on batch-128 MSE gradients.
//! * noisy: SGD on batch-4 gradients with additive Gaussian noise, then
//!   global-norm clipping.
//!
//! Gradients are zeroed outside the mask before they reach the optimizer, so
//! entries outside the mask keep their initial value and their Adam moments
//! stay at zero for the whole run.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::mask::Mask;
use crate::model::AdaptedModel;
use crate::rng::SeededRng;
use crate::task::TaskInstance;

pub(crate) const DATA_STREAM: u64 = 10;
pub(crate) const NOISE_STREAM: u64 = 11;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Clean,
    Noisy,
}

impl Regime {
    pub fn as_str(&self) -> &'static str {
        match self {
            Regime::Clean => "clean",
            Regime::Noisy => "noisy",
        }
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean" | "sft" => Ok(Regime::Clean),
            "noisy" | "rl" => Ok(Regime::Noisy),
            other => Err(Error::invalid(format!("unknown regime `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    NoisySgd,
}

/// Per-matrix optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Matrix,
    pub v: Matrix,
    pub step: u64,
    /// Noise and clipping settings; applied by [`clip_and_noise`] before the
    /// update, not by [`apply_masked_update`].
    pub noise_std: f64,
    pub clip_norm: f64,
}

impl OptimizerState {
    pub fn adam(lr: f64, rows: usize, cols: usize) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: Matrix::zeros(rows, cols),
            v: Matrix::zeros(rows, cols),
            step: 0,
            noise_std: 0.0,
            clip_norm: f64::INFINITY,
        }
    }

    pub fn noisy_sgd(lr: f64, noise_std: f64, clip_norm: f64, rows: usize, cols: usize) -> Self {
        Self {
            kind: OptimizerKind::NoisySgd,
            noise_std,
            clip_norm,
            ..Self::adam(lr, rows, cols)
        }
    }
}

/// One optimizer step on the masked entries of `param`.
pub fn apply_masked_update(param: &mut Matrix, grad: &Matrix, mask: &Mask, opt: &mut OptimizerState) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != mask.shape() || opt.m.shape() != param.shape() {
        return Err(Error::invalid(format!(
            "update shapes disagree: param {:?}, grad {:?}, mask {:?}, moments {:?}",
            param.shape(),
            grad.shape(),
            mask.shape(),
            opt.m.shape()
        )));
    }
    if mask.k() == 0 {
        return Ok(());
    }
    opt.step += 1;
    let p = param.as_mut_slice();
    let g = grad.as_slice();
    let bits = mask.bits();
    match opt.kind {
        OptimizerKind::NoisySgd => {
            for i in 0..p.len() {
                if bits[i] {
                    p[i] -= opt.lr * g[i];
                }
            }
        }
        OptimizerKind::Adam => {
            let t = opt.step as i32;
            let bc1 = 1.0 - opt.beta1.powi(t);
            let bc2 = 1.0 - opt.beta2.powi(t);
            let m = opt.m.as_mut_slice();
            let v = opt.v.as_mut_slice();
            for i in 0..p.len() {
                if !bits[i] {
                    continue;
                }
                m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * g[i];
                v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= opt.lr * m_hat / (v_hat.sqrt() + opt.eps);
            }
        }
    }
    Ok(())
}

/// Adds `N(0, noise_std²)` to every entry, then rescales by
/// `min(1, clip_norm / ‖g'‖₂)`.
pub fn clip_and_noise(grad: &Matrix, noise_std: f64, clip_norm: f64, rng: &mut SeededRng) -> Result<Matrix> {
    let mut g = grad.clone();
    add_noise(&mut g, noise_std, rng)?;
    clip_global(&mut [&mut g], clip_norm)?;
    Ok(g)
}

fn add_noise(g: &mut Matrix, noise_std: f64, rng: &mut SeededRng) -> Result<()> {
    if !(noise_std >= 0.0) {
        return Err(Error::invalid(format!("noise_std must be >= 0, got {noise_std}")));
    }
    for v in g.as_mut_slice() {
        let z = rng.standard_normal();
        *v += noise_std * z;
    }
    Ok(())
}

/// Clips the joint L2 norm of several matrices.
fn clip_global(grads: &mut [&mut Matrix], clip_norm: f64) -> Result<()> {
    if !(clip_norm >= 0.0) {
        return Err(Error::invalid(format!("clip_norm must be >= 0, got {clip_norm}")));
    }
    let norm = grads.iter().map(|g| g.frobenius_norm_sq()).sum::<f64>().sqrt();
    if norm > clip_norm {
        let f = clip_norm / norm;
        for g in grads.iter_mut() {
            g.map_inplace(|v| v * f);
        }
    }
    Ok(())
}

/// How the down-projection `A` is treated during training.
#[derive(Debug, Clone, PartialEq)]
pub enum ATraining {
    Frozen,
    /// Full LoRA: `A` and `B` both trained densely.
    Dense,
    /// Only the masked entries of `A` are trained (A+B budget split).
    Masked(Mask),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceConfig {
    pub every: usize,
    pub count: usize,
}

impl Default for TraceConfig {
    /// 50 snapshots, one every 10 steps.
    fn default() -> Self {
        Self { every: 10, count: 50 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub regime: Regime,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Trainable entries of `B`; `None` trains all of them.
    pub mask: Option<Mask>,
    pub a_training: ATraining,
    pub eval_every: usize,
    pub seed: u64,
    pub noise_std: f64,
    pub clip_norm: f64,
    pub trace: Option<TraceConfig>,
}

impl TrainConfig {
    /// Adam, batch 128, lr 5e-2, 5 000 steps.
    pub fn clean(seed: u64) -> Self {
        Self {
            regime: Regime::Clean,
            steps: 5000,
            batch: 128,
            lr: 5e-2,
            mask: None,
            a_training: ATraining::Frozen,
            eval_every: 250,
            seed,
            noise_std: 0.0,
            clip_norm: f64::INFINITY,
            trace: None,
        }
    }

    /// SGD, batch 4, lr 3e-3, noise σ = 0.005, clip 1.0, 15 000 steps.
    pub fn noisy(seed: u64) -> Self {
        Self {
            regime: Regime::Noisy,
            steps: 15_000,
            batch: 4,
            lr: 3e-3,
            mask: None,
            a_training: ATraining::Frozen,
            eval_every: 500,
            seed,
            noise_std: 0.005,
            clip_norm: 1.0,
            trace: None,
        }
    }

    pub fn for_regime(regime: Regime, seed: u64) -> Self {
        match regime {
            Regime::Clean => Self::clean(seed),
            Regime::Noisy => Self::noisy(seed),
        }
    }

    pub fn with_mask(mut self, mask: Mask) -> Self {
        self.mask = Some(mask);
        self
    }

    pub fn full_lora(mut self) -> Self {
        self.mask = None;
        self.a_training = ATraining::Dense;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("steps must be >= 1"));
        }
        if self.batch == 0 {
            return Err(Error::invalid("batch must be >= 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::invalid("eval_every must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("lr must be positive, got {}", self.lr)));
        }
        if self.a_training == ATraining::Dense && self.mask.is_some() {
            return Err(Error::invalid("full LoRA trains B densely; a mask cannot be combined with it"));
        }
        Ok(())
    }

    fn optimizer(&self, rows: usize, cols: usize) -> OptimizerState {
        match self.regime {
            Regime::Clean => OptimizerState::adam(self.lr, rows, cols),
            Regime::Noisy => OptimizerState::noisy_sgd(self.lr, self.noise_std, self.clip_norm, rows, cols),
        }
    }

    pub fn echo(&self) -> ConfigEcho {
        ConfigEcho {
            regime: self.regime,
            steps: self.steps,
            batch: self.batch,
            lr: self.lr,
            mask_k: self.mask.as_ref().map(Mask::k),
            a_training: match &self.a_training {
                ATraining::Frozen => "frozen".into(),
                ATraining::Dense => "dense".into(),
                ATraining::Masked(m) => format!("masked:{}", m.k()),
            },
            eval_every: self.eval_every,
            seed: self.seed,
            noise_std: self.noise_std,
            clip_norm: if self.clip_norm.is_finite() { Some(self.clip_norm) } else { None },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub regime: Regime,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub mask_k: Option<usize>,
    pub a_training: String,
    pub eval_every: usize,
    pub seed: u64,
    pub noise_std: f64,
    pub clip_norm: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub train_loss: f64,
    pub relative_mse: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub records: Vec<EvalRecord>,
    pub final_relative_mse: f64,
    /// Flattened `∇_B` snapshots (before masking), when tracing was on.
    #[serde(skip)]
    pub gradient_log: Option<Vec<Vec<f64>>>,
    pub config: ConfigEcho,
    pub wall_time_secs: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub report: RunReport,
    pub model: AdaptedModel,
}

/// Trains a fresh copy of `task.base`.
pub fn train(task: &TaskInstance, config: &TrainConfig) -> Result<TrainedRun> {
    train_with_sink(task, config, |_| Ok(()))
}

/// Like [`train`], calling `sink` with every evaluation record as it is made.
pub fn train_with_sink(
    task: &TaskInstance,
    config: &TrainConfig,
    mut sink: impl FnMut(&EvalRecord) -> Result<()>,
) -> Result<TrainedRun> {
    config.validate()?;
    let started = Instant::now();
    let mut model = task.base.clone();
    let (hb, rb) = model.b.shape();
    let (ra, ia) = model.a.shape();

    let b_mask = match &config.mask {
        Some(m) if m.shape() != (hb, rb) => {
            return Err(Error::invalid(format!("mask is {:?}, B is {:?}", m.shape(), (hb, rb))));
        }
        Some(m) => m.clone(),
        None => Mask::full(hb, rb),
    };
    let a_mask = match &config.a_training {
        ATraining::Frozen => None,
        ATraining::Dense => Some(Mask::full(ra, ia)),
        ATraining::Masked(m) if m.shape() != (ra, ia) => {
            return Err(Error::invalid(format!("A mask is {:?}, A is {:?}", m.shape(), (ra, ia))));
        }
        ATraining::Masked(m) => Some(m.clone()),
    };

    let mut data_rng = SeededRng::with_stream(config.seed, DATA_STREAM);
    let mut noise_rng = SeededRng::with_stream(config.seed, NOISE_STREAM);
    let mut opt_b = config.optimizer(hb, rb);
    let mut opt_a = config.optimizer(ra, ia);

    let mut records = Vec::new();
    let mut trace = config.trace.map(|t| (t, Vec::with_capacity(t.count)));
    let mut last_loss = f64::NAN;

    let mut record = |step: usize, loss: f64, model: &AdaptedModel, records: &mut Vec<EvalRecord>| -> Result<()> {
        let rel = task.heldout_relative_mse(model)?;
        if !rel.is_finite() {
            return Err(Error::Diverged { step });
        }
        let r = EvalRecord {
            step,
            train_loss: loss,
            relative_mse: rel,
        };
        sink(&r)?;
        records.push(r);
        Ok(())
    };

    for step in 0..config.steps {
        let (batch, f) = task.sample_with_features(config.batch, &mut data_rng)?;
        let f = if a_mask.is_some() {
            model.refresh_features(&batch.x, f.wx)?
        } else {
            f
        };
        let g = model.backward_features(&f, &batch.x, &batch.y, a_mask.is_some())?;
        if !g.loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        last_loss = g.loss;
        if step % config.eval_every == 0 {
            record(step, g.loss, &model, &mut records)?;
        }

        let mut gb = g.d_b;
        let mut ga = g.d_a;
        if config.regime == Regime::Noisy {
            add_noise(&mut gb, config.noise_std, &mut noise_rng)?;
            // A's gradient is identically zero while B is; keep it that way
            let b_is_zero = model.b.as_slice().iter().all(|&v| v == 0.0);
            if let (Some(ga), false) = (ga.as_mut(), b_is_zero) {
                add_noise(ga, config.noise_std, &mut noise_rng)?;
            }
        }
        if let Some((tc, log)) = trace.as_mut() {
            if step % tc.every == 0 && log.len() < tc.count {
                log.push(gb.as_slice().to_vec());
            }
        }
        b_mask.apply(&mut gb);
        if let (Some(m), Some(ga)) = (&a_mask, ga.as_mut()) {
            m.apply(ga);
        }
        if config.regime == Regime::Noisy {
            match ga.as_mut() {
                Some(ga) => clip_global(&mut [&mut gb, ga], config.clip_norm)?,
                None => clip_global(&mut [&mut gb], config.clip_norm)?,
            }
        }
        apply_masked_update(&mut model.b, &gb, &b_mask, &mut opt_b)?;
        if let (Some(m), Some(ga)) = (&a_mask, ga.as_ref()) {
            apply_masked_update(&mut model.a, ga, m, &mut opt_a)?;
        }
    }
    record(config.steps, last_loss, &model, &mut records)?;

    let final_relative_mse = records.last().map(|r| r.relative_mse).unwrap_or(f64::NAN);
    Ok(TrainedRun {
        report: RunReport {
            schema_version: crate::SCHEMA_VERSION,
            records,
            final_relative_mse,
            gradient_log: trace.map(|(_, log)| log),
            config: config.echo(),
            wall_time_secs: started.elapsed().as_secs_f64(),
        },
        model,
    })
}

/// Mean squared displacement of `b` inside `circuit` over that inside a
/// size-matched `random` mask. `B` starts at zero, so its final value is
/// the displacement.
pub fn update_energy(b: &Matrix, circuit: &Mask, random: &Mask) -> Result<f64> {
    let energy = |m: &Mask| -> Result<f64> {
        if m.shape() != b.shape() {
            return Err(Error::invalid(format!("mask {:?} vs B {:?}", m.shape(), b.shape())));
        }
        if m.k() == 0 {
            return Err(Error::invalid("update energy of an empty mask"));
        }
        Ok(m.indices().map(|i| b.as_slice()[i].powi(2)).sum::<f64>() / m.k() as f64)
    };
    let num = energy(circuit)?;
    let den = energy(random)?;
    if den == 0.0 {
        return Err(Error::Undefined("random-mask update energy is zero".into()));
    }
    Ok(num / den)
}
