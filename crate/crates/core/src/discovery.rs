//! Circuit discovery at the zero-adapter point.
//!
//! Gradient statistics over `N` forward-backward passes are reduced to a
//! per-entry score, and the circuit is the top-`k` entries of `B` under that
//! score. Scores:
//!
//! | method      | score of entry `(i, j)`                    |
//! |-------------|--------------------------------------------|
//! | `s_hat`     | `|mean_k g_k|`                             |
//! | `f_hat`     | `mean_k g_k²`                              |
//! | `magnitude` | `|(W1·Aᵀ)_ij|`                             |
//! | `wanda`     | `|(W1·Aᵀ)_ij · mean_k g_k|`                |
//! | `row_*`     | row sum of the element score, per row      |

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{matmul_nt, Matrix};
use crate::mask::Mask;
use crate::model::AdaptedModel;
use crate::rng::SeededRng;
use crate::task::TaskInstance;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    SHat,
    FHat,
    Magnitude,
    Wanda,
    RowF,
    RowMag,
    RowWanda,
    Random,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::SHat,
        Method::FHat,
        Method::Magnitude,
        Method::Wanda,
        Method::RowF,
        Method::RowMag,
        Method::RowWanda,
        Method::Random,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::SHat => "s_hat",
            Method::FHat => "f_hat",
            Method::Magnitude => "magnitude",
            Method::Wanda => "wanda",
            Method::RowF => "row_f",
            Method::RowMag => "row_mag",
            Method::RowWanda => "row_wanda",
            Method::Random => "random",
        }
    }

    pub fn is_row(&self) -> bool {
        matches!(self, Method::RowF | Method::RowMag | Method::RowWanda)
    }

    /// Whether the score needs gradient statistics.
    pub fn uses_gradients(&self) -> bool {
        !matches!(self, Method::Magnitude | Method::RowMag | Method::Random)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .iter()
            .copied()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown scoring method `{s}`")))
    }
}

/// Running first and second moments of a parameter's gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct GradStats {
    pub sum_g: Matrix,
    pub sum_g2: Matrix,
    pub n: usize,
}

impl GradStats {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            sum_g: Matrix::zeros(rows, cols),
            sum_g2: Matrix::zeros(rows, cols),
            n: 0,
        }
    }

    pub fn push(&mut self, g: &Matrix) -> Result<()> {
        if g.shape() != self.sum_g.shape() {
            return Err(Error::invalid(format!(
                "gradient {:?} does not match stats {:?}",
                g.shape(),
                self.sum_g.shape()
            )));
        }
        for ((s, s2), &v) in self
            .sum_g
            .as_mut_slice()
            .iter_mut()
            .zip(self.sum_g2.as_mut_slice())
            .zip(g.as_slice())
        {
            *s += v;
            *s2 += v * v;
        }
        self.n += 1;
        Ok(())
    }

    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a Matrix>) -> Result<Self> {
        let mut it = samples.into_iter().peekable();
        let first = it.peek().ok_or_else(|| Error::invalid("no gradient samples"))?;
        let mut stats = GradStats::new(first.rows(), first.cols());
        for g in it {
            stats.push(g)?;
        }
        Ok(stats)
    }

    pub fn mean(&self) -> Matrix {
        self.sum_g.scaled(1.0 / self.n as f64)
    }

    /// `sum_g2 / n`
    pub fn second_moment(&self) -> Matrix {
        self.sum_g2.scaled(1.0 / self.n as f64)
    }

    /// Population variance estimate `F̂ − mean²`, clamped at zero.
    pub fn variance(&self) -> Matrix {
        let n = self.n as f64;
        self.sum_g2
            .zip_with(&self.sum_g, "variance", |s2, s| (s2 / n - (s / n) * (s / n)).max(0.0))
            .expect("moments share a shape")
    }
}

/// Which adapter factor a statistics pass differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Factor {
    A,
    B,
}

/// Gradient statistics of `∇_B` over `n` batches drawn from the task.
/// The adapter must be at its zero initialization.
pub fn accumulate(model: &AdaptedModel, task: &TaskInstance, n: usize, batch: usize, rng: &mut SeededRng) -> Result<GradStats> {
    if !model.b.is_zero() {
        return Err(Error::Precondition(
            "gradient scores are defined at the zero-adapter point; B is non-zero".into(),
        ));
    }
    accumulate_factor(model, task, n, batch, rng, Factor::B)
}

/// Like [`accumulate`] but for either factor and without the zero-`B`
/// requirement.
pub fn accumulate_factor(
    model: &AdaptedModel,
    task: &TaskInstance,
    n: usize,
    batch: usize,
    rng: &mut SeededRng,
    factor: Factor,
) -> Result<GradStats> {
    if n == 0 {
        return Err(Error::invalid("need at least one scoring pass"));
    }
    let shape = match factor {
        Factor::A => model.a.shape(),
        Factor::B => model.b.shape(),
    };
    let mut stats = GradStats::new(shape.0, shape.1);
    let same_w1 = model.w1 == task.base.w1;
    let same_a = model.a == task.base.a;
    for _ in 0..n {
        let (b, f) = task.sample_with_features(batch, rng)?;
        let f = match (same_w1, same_a) {
            (true, true) => f,
            (true, false) => model.refresh_features(&b.x, f.wx)?,
            _ => model.features(&b.x)?,
        };
        let g = model.backward_features(&f, &b.x, &b.y, factor == Factor::A)?;
        match factor {
            Factor::A => stats.push(g.d_a.as_ref().expect("requested"))?,
            Factor::B => stats.push(&g.d_b)?,
        }
    }
    Ok(stats)
}

/// `∇_B` statistics after each of the pass counts in `checkpoints`, taken
/// from a single stream of batches, so smaller counts are prefixes of
/// larger ones.
pub fn accumulate_nested(
    model: &AdaptedModel,
    task: &TaskInstance,
    checkpoints: &[usize],
    batch: usize,
    rng: &mut SeededRng,
) -> Result<Vec<GradStats>> {
    if !model.b.is_zero() {
        return Err(Error::Precondition(
            "gradient scores are defined at the zero-adapter point; B is non-zero".into(),
        ));
    }
    if checkpoints.is_empty() || checkpoints.contains(&0) {
        return Err(Error::invalid("checkpoints must be non-empty and >= 1"));
    }
    let max = *checkpoints.iter().max().expect("non-empty");
    let (rows, cols) = model.b.shape();
    let mut stats = GradStats::new(rows, cols);
    let mut snaps: Vec<(usize, GradStats)> = Vec::new();
    for _ in 0..max {
        let (b, f) = task.sample_with_features(batch, rng)?;
        let f = if model.w1 == task.base.w1 && model.a == task.base.a {
            f
        } else {
            model.features(&b.x)?
        };
        stats.push(&model.backward_features(&f, &b.x, &b.y, false)?.d_b)?;
        if checkpoints.contains(&stats.n) {
            snaps.push((stats.n, stats.clone()));
        }
    }
    Ok(checkpoints
        .iter()
        .map(|n| snaps.iter().find(|(m, _)| m == n).expect("recorded").1.clone())
        .collect())
}

fn row_aggregate(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..m.rows() {
        let total: f64 = m.row(i).iter().sum();
        out.row_mut(i).fill(total);
    }
    out
}

/// Entry scores (all `>= 0`) for `method`. `model` supplies the projected
/// base weight `W1·Aᵀ` for the weight-statistic methods.
pub fn score(stats: &GradStats, method: Method, model: &AdaptedModel) -> Result<Matrix> {
    if stats.n == 0 {
        return Err(Error::invalid("gradient statistics are empty"));
    }
    let projected = || -> Result<Matrix> {
        let p = matmul_nt(&model.w1, &model.a)?;
        if p.shape() != stats.sum_g.shape() {
            return Err(Error::invalid(format!(
                "{method} scores B entries; stats are {:?}",
                stats.sum_g.shape()
            )));
        }
        Ok(p)
    };
    let element = |m: Method| -> Result<Matrix> {
        Ok(match m {
            Method::SHat | Method::Random => stats.mean().map(f64::abs),
            Method::FHat | Method::RowF => stats.second_moment(),
            Method::Magnitude | Method::RowMag => projected()?.map(f64::abs),
            Method::Wanda | Method::RowWanda => projected()?.hadamard(&stats.mean())?.map(f64::abs),
        })
    };
    match method {
        Method::Random => Err(Error::invalid("`random` has no score; use random_circuit")),
        m if m.is_row() => Ok(row_aggregate(&element(m)?)),
        m => element(m),
    }
}

/// [`score`] for methods that may not need gradient statistics; `stats` is
/// only required by the gradient methods.
pub fn score_with(stats: Option<&GradStats>, method: Method, model: &AdaptedModel) -> Result<Matrix> {
    match stats {
        Some(s) => score(s, method, model),
        None if method.uses_gradients() => Err(Error::invalid(format!("{method} needs gradient statistics"))),
        None => {
            let (rows, cols) = model.b.shape();
            let mut carrier = GradStats::new(rows, cols);
            carrier.n = 1;
            score(&carrier, method, model)
        }
    }
}

/// One selected entry, serialized as `[row, col, score]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CircuitEntry(pub usize, pub usize, pub f64);

impl CircuitEntry {
    pub fn row(&self) -> usize {
        self.0
    }
    pub fn col(&self) -> usize {
        self.1
    }
    pub fn score(&self) -> f64 {
        self.2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Circuit {
    #[serde(default = "crate::schema_version")]
    pub schema_version: u32,
    pub method: Method,
    pub k: usize,
    pub n_passes: usize,
    pub discovery_seed: u64,
    /// Score descending, then `(row, col)` ascending.
    pub entries: Vec<CircuitEntry>,
}

impl Circuit {
    pub fn with_provenance(mut self, discovery_seed: u64, n_passes: usize) -> Self {
        self.discovery_seed = discovery_seed;
        self.n_passes = n_passes;
        self
    }

    pub fn coords(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.entries.iter().map(|e| (e.0, e.1))
    }

    pub fn to_mask(&self, rows: usize, cols: usize) -> Result<Mask> {
        Mask::from_coords(rows, cols, self.coords())
    }

    /// Checks the structural invariants of a circuit read from disk.
    pub fn validate(&self, rows: usize, cols: usize) -> Result<()> {
        if self.entries.len() != self.k {
            return Err(Error::invalid(format!(
                "circuit lists {} entries but k = {}",
                self.entries.len(),
                self.k
            )));
        }
        let mut seen = HashSet::new();
        for e in &self.entries {
            if e.0 >= rows || e.1 >= cols {
                return Err(Error::invalid(format!("entry ({}, {}) outside {rows}x{cols}", e.0, e.1)));
            }
            if !seen.insert((e.0, e.1)) {
                return Err(Error::invalid(format!("duplicate entry ({}, {})", e.0, e.1)));
            }
        }
        if self.entries.windows(2).any(|w| w[0].2 < w[1].2) {
            return Err(Error::invalid("circuit scores are not non-increasing"));
        }
        Ok(())
    }
}

fn entry_order(a: &CircuitEntry, b: &CircuitEntry) -> Ordering {
    b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1))
}

/// The `k` highest-scoring entries, ties broken by `(row, col)`.
///
/// Row methods select whole rows by row score, so `k` must be a multiple of
/// the number of columns.
pub fn select_top_k(scores: &Matrix, k: usize, method: Method) -> Result<Circuit> {
    let (rows, cols) = scores.shape();
    if k > scores.len() {
        return Err(Error::invalid(format!("k = {k} exceeds {} entries", scores.len())));
    }
    if !scores.is_finite() {
        return Err(Error::invalid("scores contain non-finite values"));
    }
    let entries = if method.is_row() {
        if cols == 0 || k % cols != 0 {
            return Err(Error::invalid(format!(
                "row method {method} needs k to be a multiple of {cols}, got {k}"
            )));
        }
        let mut row_scores: Vec<(f64, usize)> = (0..rows)
            .map(|i| (scores.row(i).iter().sum::<f64>() / cols as f64, i))
            .collect();
        row_scores.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut entries: Vec<CircuitEntry> = row_scores[..k / cols]
            .iter()
            .flat_map(|&(_, i)| (0..cols).map(move |j| (i, j)))
            .map(|(i, j)| CircuitEntry(i, j, scores[(i, j)]))
            .collect();
        entries.sort_by(entry_order);
        entries
    } else {
        let mut all: Vec<CircuitEntry> = (0..rows)
            .flat_map(|i| (0..cols).map(move |j| (i, j)))
            .map(|(i, j)| CircuitEntry(i, j, scores[(i, j)]))
            .collect();
        if k > 0 && k < all.len() {
            all.select_nth_unstable_by(k - 1, entry_order);
        }
        all.truncate(k);
        all.sort_by(entry_order);
        all
    };
    Ok(Circuit {
        schema_version: crate::SCHEMA_VERSION,
        method,
        k,
        n_passes: 0,
        discovery_seed: 0,
        entries,
    })
}

/// `k` distinct uniformly random entries of a `rows x cols` matrix, score 0.
pub fn random_circuit(k: usize, rows: usize, cols: usize, rng: &mut SeededRng) -> Result<Circuit> {
    let n = rows * cols;
    if k > n {
        return Err(Error::invalid(format!("k = {k} exceeds {n} entries")));
    }
    let mut idx = rng.sample_distinct(n, k);
    idx.sort_unstable();
    Ok(Circuit {
        schema_version: crate::SCHEMA_VERSION,
        method: Method::Random,
        k,
        n_passes: 0,
        discovery_seed: rng.seed(),
        entries: idx.into_iter().map(|i| CircuitEntry(i / cols, i % cols, 0.0)).collect(),
    })
}

/// Fraction of shared coordinates, `|a ∩ b| / k`.
pub fn overlap(a: &Circuit, b: &Circuit) -> Result<f64> {
    if a.k != b.k || a.k == 0 {
        return Err(Error::invalid(format!(
            "overlap needs equal non-zero k, got {} and {}",
            a.k, b.k
        )));
    }
    let set: HashSet<(usize, usize)> = a.coords().collect();
    let shared = b.coords().filter(|c| set.contains(c)).count();
    Ok(shared as f64 / a.k as f64)
}

/// Copy of `model` with `A' = A + ε·‖A‖_F · Δ/‖Δ‖_F`, `Δ ~ N(0, I)`.
pub fn perturb_a(model: &AdaptedModel, epsilon: f64, rng: &mut SeededRng) -> Result<AdaptedModel> {
    if !(epsilon >= 0.0) || !epsilon.is_finite() {
        return Err(Error::invalid(format!("epsilon must be >= 0, got {epsilon}")));
    }
    let delta = rng.normal_matrix(model.a.rows(), model.a.cols(), 0.0, 1.0);
    let mut out = model.clone();
    if epsilon == 0.0 {
        return Ok(out);
    }
    let coef = epsilon * model.a.frobenius_norm() / delta.frobenius_norm();
    out.a.axpy(coef, &delta)?;
    Ok(out)
}

/// Discovery settings for one circuit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscoveryConfig {
    pub method: Method,
    pub k: usize,
    pub n_passes: usize,
    pub batch: usize,
    pub seed: u64,
}

impl DiscoveryConfig {
    /// 100 passes of batch 128.
    pub fn new(method: Method, k: usize, seed: u64) -> Self {
        Self {
            method,
            k,
            n_passes: 100,
            batch: 128,
            seed,
        }
    }
}

/// Runs accumulate → score → select on `model` (normally `task.base`).
/// Returns the circuit and, for gradient methods, the statistics used.
pub fn discover(model: &AdaptedModel, task: &TaskInstance, cfg: &DiscoveryConfig) -> Result<(Circuit, Option<GradStats>)> {
    let (rows, cols) = model.b.shape();
    let mut rng = SeededRng::new(cfg.seed);
    if cfg.method == Method::Random {
        let c = random_circuit(cfg.k, rows, cols, &mut rng)?;
        return Ok((c.with_provenance(cfg.seed, 0), None));
    }
    let stats = if cfg.method.uses_gradients() {
        Some(accumulate(model, task, cfg.n_passes, cfg.batch, &mut rng)?)
    } else {
        None
    };
    let scores = score_with(stats.as_ref(), cfg.method, model)?;
    let passes = if stats.is_some() { cfg.n_passes } else { 0 };
    let circuit = select_top_k(&scores, cfg.k, cfg.method)?.with_provenance(cfg.seed, passes);
    Ok((circuit, stats))
}
