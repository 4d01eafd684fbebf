//! Flat `key = value` experiment configuration.
//!
//! One key per line, `#` starts a comment. Lists are comma separated.
//! Command-line overrides go through the same [`ExperimentConfig::set`], so
//! every key accepted in a file is also accepted as `--set key=value`.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::diagnostics::{RankEstimator, KNOCKOUT_FRACTIONS, KNOCKOUT_SEED};
use crate::discovery::Method;
use crate::error::{Error, Result};
use crate::model::Dims;
use crate::task::{TargetKind, TargetSpec};
use crate::training::{Regime, TraceConfig, TrainConfig};

/// A budget as written in a config: a fraction of `|B|` (contains a `.`)
/// or an absolute entry count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Budget {
    Fraction(f64),
    Count(usize),
}

impl Budget {
    /// Entry count; fractions map to `round_half_to_even(f · total)`.
    pub fn resolve(&self, total: usize) -> usize {
        match *self {
            Budget::Fraction(f) => (f * total as f64).round_ties_even() as usize,
            Budget::Count(k) => k,
        }
    }

    pub fn fraction(&self, total: usize) -> f64 {
        match *self {
            Budget::Fraction(f) => f,
            Budget::Count(k) => k as f64 / total as f64,
        }
    }

    /// Directory/label form, e.g. `f0.02` or `k51`.
    pub fn label(&self) -> String {
        match self {
            Budget::Fraction(f) => format!("f{f}"),
            Budget::Count(k) => format!("k{k}"),
        }
    }
}

impl FromStr for Budget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.contains('.') || s.contains('e') {
            let f: f64 = s
                .parse()
                .map_err(|_| Error::Config(format!("bad budget fraction `{s}`")))?;
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("budget fraction {f} outside [0, 1]")));
            }
            Ok(Budget::Fraction(f))
        } else {
            s.parse()
                .map(Budget::Count)
                .map_err(|_| Error::Config(format!("bad budget `{s}`")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KnockoutModel {
    FullLora,
    FullB,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceMode {
    /// Stochastic gradients of the regime at the zero-adapter point.
    AtInit,
    /// Snapshots along a training run.
    Trajectory,
}

/// Optional training hyperparameter overrides on top of the regime defaults.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainOverrides {
    pub steps: Option<usize>,
    pub lr: Option<f64>,
    pub batch: Option<usize>,
    pub eval_every: Option<usize>,
    pub noise_std: Option<f64>,
    pub clip_norm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: String,
    pub task: TargetSpec,
    pub methods: Vec<Method>,
    pub budgets: Vec<Budget>,
    /// `None` pairs the regime with the task: dense → clean, sparse → noisy.
    pub regime: Option<Regime>,
    pub seeds: usize,
    pub master_seed: u64,
    pub train: TrainOverrides,
    pub n_passes: usize,
    pub discovery_batch: usize,
    pub full_lora: bool,
    pub out: PathBuf,
    pub jobs: usize,

    pub knockout_fractions: Vec<f64>,
    pub knockout_method: Method,
    pub knockout_seed: u64,
    pub knockout_model: KnockoutModel,

    pub stability_ns: Vec<usize>,
    pub stability_reference_n: usize,
    pub epsilons: Vec<f64>,
    pub stability_k: usize,

    pub diagnose_k: usize,
    pub trace: TraceConfig,
    pub trace_mode: TraceMode,
    pub rank_estimator: RankEstimator,
    pub sign_samples: usize,
    pub alignment_rank: usize,

    pub warmup_steps: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: "default".into(),
            task: TargetSpec::sparse(0),
            methods: vec![Method::SHat, Method::Random],
            budgets: [0.02, 0.05, 0.1, 0.2, 0.5, 1.0].map(Budget::Fraction).to_vec(),
            regime: None,
            seeds: 10,
            master_seed: 0,
            train: TrainOverrides::default(),
            n_passes: 100,
            discovery_batch: 128,
            full_lora: true,
            out: PathBuf::from("runs"),
            jobs: 1,
            knockout_fractions: KNOCKOUT_FRACTIONS.to_vec(),
            knockout_method: Method::FHat,
            knockout_seed: KNOCKOUT_SEED,
            knockout_model: KnockoutModel::FullLora,
            stability_ns: vec![10, 25, 50],
            stability_reference_n: 100,
            epsilons: vec![0.01, 0.05, 0.1, 0.25, 0.5, 1.0, 2.0],
            stability_k: 51,
            diagnose_k: 51,
            trace: TraceConfig::default(),
            trace_mode: TraceMode::AtInit,
            rank_estimator: RankEstimator::ParticipationRatio,
            sign_samples: 100,
            alignment_rank: 16,
            warmup_steps: 50,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_kv_str(&text)
    }

    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", lineno + 1, strip_prefix(e))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key. Unknown keys are a config error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.task;
        match key {
            "experiment" => self.experiment = value.to_string(),
            "task" | "kind" => {
                t.kind = value
                    .parse::<TargetKind>()
                    .map_err(|e| Error::Config(strip_prefix(e)))?
            }
            "residual_rank" => t.residual_rank = parse(key, value)?,
            "residual_factor_std" => t.residual_factor_std = parse(key, value)?,
            "sparse_fraction" => t.sparse_fraction = parse(key, value)?,
            "large_std" => t.large_std = parse(key, value)?,
            "small_std" => t.small_std = parse(key, value)?,
            "heldout_size" => t.heldout_size = parse(key, value)?,
            "dims" => {
                let v: Vec<usize> = parse_list(key, value)?;
                if v.len() != 4 {
                    return Err(Error::Config("dims needs input,hidden,output,rank".into()));
                }
                t.dims = Dims {
                    input: v[0],
                    hidden: v[1],
                    output: v[2],
                    rank: v[3],
                };
            }
            "methods" | "method" => {
                self.methods = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse::<Method>().map_err(|e| Error::Config(strip_prefix(e))))
                    .collect::<Result<_>>()?
            }
            "budgets" | "budget" => {
                self.budgets = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(str::parse)
                    .collect::<Result<_>>()?
            }
            "regime" => {
                self.regime = match value {
                    "auto" => None,
                    v => Some(v.parse::<Regime>().map_err(|e| Error::Config(strip_prefix(e)))?),
                }
            }
            "seeds" => self.seeds = parse(key, value)?,
            "seed" | "master_seed" => self.master_seed = parse(key, value)?,
            "steps" => self.train.steps = Some(parse(key, value)?),
            "lr" => self.train.lr = Some(parse(key, value)?),
            "batch" => self.train.batch = Some(parse(key, value)?),
            "eval_every" => self.train.eval_every = Some(parse(key, value)?),
            "noise_std" => self.train.noise_std = Some(parse(key, value)?),
            "clip_norm" => self.train.clip_norm = Some(parse(key, value)?),
            "n_passes" => self.n_passes = parse(key, value)?,
            "discovery_batch" => self.discovery_batch = parse(key, value)?,
            "full_lora" => self.full_lora = parse_bool(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "jobs" => self.jobs = parse(key, value)?,
            "knockout_fractions" => self.knockout_fractions = parse_list(key, value)?,
            "knockout_method" => {
                self.knockout_method = value.parse().map_err(|e| Error::Config(strip_prefix(e)))?
            }
            "knockout_seed" => self.knockout_seed = parse(key, value)?,
            "knockout_model" => {
                self.knockout_model = match value {
                    "full_lora" => KnockoutModel::FullLora,
                    "full_b" => KnockoutModel::FullB,
                    _ => return Err(Error::Config(format!("unknown knockout_model `{value}`"))),
                }
            }
            "stability_ns" => self.stability_ns = parse_list(key, value)?,
            "stability_reference_n" => self.stability_reference_n = parse(key, value)?,
            "epsilons" => self.epsilons = parse_list(key, value)?,
            "stability_k" => self.stability_k = parse(key, value)?,
            "diagnose_k" => self.diagnose_k = parse(key, value)?,
            "trace_every" => self.trace.every = parse(key, value)?,
            "trace_count" => self.trace.count = parse(key, value)?,
            "trace_mode" => {
                self.trace_mode = match value {
                    "at_init" => TraceMode::AtInit,
                    "trajectory" => TraceMode::Trajectory,
                    _ => return Err(Error::Config(format!("unknown trace_mode `{value}`"))),
                }
            }
            "rank_estimator" => {
                self.rank_estimator = match value {
                    "participation_ratio" => RankEstimator::ParticipationRatio,
                    "entropy" => RankEstimator::Entropy,
                    _ => return Err(Error::Config(format!("unknown rank_estimator `{value}`"))),
                }
            }
            "sign_samples" => self.sign_samples = parse(key, value)?,
            "alignment_rank" => self.alignment_rank = parse(key, value)?,
            "warmup_steps" => self.warmup_steps = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let total = self.task.dims.b_entries();
        self.task.validate().map_err(|e| Error::Config(strip_prefix(e)))?;
        if self.seeds == 0 {
            return Err(Error::Config("seeds must be >= 1".into()));
        }
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be >= 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("at least one method is required".into()));
        }
        if let Some(b) = self.budgets.iter().find(|b| b.resolve(total) > total) {
            return Err(Error::Config(format!("budget {b:?} exceeds {total} entries")));
        }
        if self.n_passes == 0 || self.discovery_batch == 0 {
            return Err(Error::Config("n_passes and discovery_batch must be >= 1".into()));
        }
        if self.stability_k == 0 || self.stability_k > total || self.diagnose_k == 0 || self.diagnose_k > total {
            return Err(Error::Config(format!("stability_k and diagnose_k must be in 1..={total}")));
        }
        if self.trace.count < 2 || self.trace.every == 0 {
            return Err(Error::Config("trace_count must be >= 2 and trace_every >= 1".into()));
        }
        if let Some(lr) = self.train.lr.filter(|lr| !(*lr > 0.0 && lr.is_finite())) {
            return Err(Error::Config(format!("lr must be positive, got {lr}")));
        }
        if self.train.steps == Some(0) || self.train.batch == Some(0) || self.train.eval_every == Some(0) {
            return Err(Error::Config("steps, batch and eval_every must be >= 1".into()));
        }
        if self.sign_samples < 2 {
            return Err(Error::Config("sign_samples must be >= 2".into()));
        }
        Ok(())
    }

    pub fn regime(&self) -> Regime {
        self.regime.unwrap_or(match self.task.kind {
            TargetKind::DenseRank2 => Regime::Clean,
            TargetKind::SparseB => Regime::Noisy,
        })
    }

    /// Regime defaults with the configured overrides applied.
    pub fn train_config(&self, regime: Regime, seed: u64) -> TrainConfig {
        let mut c = TrainConfig::for_regime(regime, seed);
        let o = &self.train;
        if let Some(v) = o.steps {
            c.steps = v;
        }
        if let Some(v) = o.lr {
            c.lr = v;
        }
        if let Some(v) = o.batch {
            c.batch = v;
        }
        if let Some(v) = o.eval_every {
            c.eval_every = v;
        }
        if let Some(v) = o.noise_std {
            c.noise_std = v;
        }
        if let Some(v) = o.clip_norm {
            c.clip_norm = v;
        }
        c
    }
}

fn strip_prefix(e: Error) -> String {
    match e {
        Error::Config(m) | Error::InvalidArgument(m) => m,
        other => other.to_string(),
    }
}
