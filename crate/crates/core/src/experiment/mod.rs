//! Experiment orchestration behind the `circuit-seed` command line.
//!
//! Every command reads an [`ExperimentConfig`], runs its replicates (in
//! parallel with `jobs > 1`), and writes results under
//! `<out>/<experiment>/`. Replicate `i` draws all of its randomness from
//! seeds derived from `(master_seed, i)`, so results do not depend on the
//! number of worker threads.

mod commands;
pub mod config;
mod output;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::task::{make_task, TaskInstance};

pub use commands::{
    cmd_ablate_ab, cmd_compare, cmd_diagnose, cmd_discover, cmd_knockout, cmd_stability, cmd_sweep, cmd_train,
    run_ablate_ab, run_diagnose, run_knockout, run_stability, run_sweep, AblationRow, CompareReport, CrossTargetRow,
    DiagnoseRow, DiagnosticsReport, KnockoutMean, KnockoutRow, McRow, PerturbationRow, RegimeDiagnostics,
    RetentionReport, SignReport, StabilityReport,
};
pub use config::{Budget, ExperimentConfig, KnockoutModel, TraceMode, TrainOverrides};
pub use output::{AggregateRow, SweepRow, SweepTable, K_ROUNDING};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Discover,
    Train,
    Sweep,
    Knockout,
    Diagnose,
    Stability,
    AblateAb,
    Compare,
}

/// What a command produced.
#[derive(Debug, Clone, Default)]
pub struct Outcome {
    /// Human-readable summary for the terminal.
    pub summary: String,
    /// Cells that ended with a diverged run.
    pub diverged: usize,
    pub out_dir: PathBuf,
}

/// Process exit status for a command result: 0 success, 2 configuration or
/// argument error, 3 diverged runs, 4 I/O error, 1 anything else.
pub fn exit_code(result: &Result<Outcome>) -> i32 {
    match result {
        Ok(o) if o.diverged > 0 => 3,
        Ok(_) => 0,
        Err(Error::Config(_) | Error::InvalidArgument(_) | Error::Precondition(_) | Error::Serde(_)) => 2,
        Err(Error::Diverged { .. }) => 3,
        Err(Error::Io { .. } | Error::Csv(_)) => 4,
        Err(_) => 1,
    }
}

pub fn run(command: Command, cfg: &ExperimentConfig, circuits: &[PathBuf]) -> Result<Outcome> {
    match command {
        Command::Discover => cmd_discover(cfg),
        Command::Train => cmd_train(cfg),
        Command::Sweep => cmd_sweep(cfg),
        Command::Knockout => cmd_knockout(cfg),
        Command::Diagnose => cmd_diagnose(cfg),
        Command::Stability => cmd_stability(cfg),
        Command::AblateAb => cmd_ablate_ab(cfg),
        Command::Compare => match circuits {
            [a, b] => cmd_compare(cfg, a, b),
            _ => Err(Error::Config("compare needs exactly two circuit files".into())),
        },
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic child seed of `parent` for `(tag, index)`.
pub fn derive_seed(parent: u64, tag: u64, index: u64) -> u64 {
    splitmix64(parent ^ splitmix64(splitmix64(tag) ^ index))
}

const TAG_BASE: u64 = 1;
const TAG_TARGET: u64 = 2;
const TAG_DISCOVERY: u64 = 3;
const TAG_TRAIN: u64 = 4;
const TAG_RANDOM: u64 = 5;
const TAG_ALT_TARGET: u64 = 6;
const TAG_AUX: u64 = 7;

/// Seeds of one replicate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedPlan {
    pub index: usize,
    /// Student base weights.
    pub base: u64,
    /// Teacher residual and held-out set.
    pub target: u64,
    /// A second teacher on the same base, for cross-target comparisons.
    pub alt_target: u64,
    pub discovery: u64,
    pub train: u64,
    /// Parent of the random-circuit seeds (one per budget).
    pub random: u64,
    /// Parent of auxiliary draws (perturbations, traces).
    pub aux: u64,
}

impl SeedPlan {
    pub fn new(master: u64, index: usize) -> Self {
        let i = index as u64;
        Self {
            index,
            base: derive_seed(master, TAG_BASE, i),
            target: derive_seed(master, TAG_TARGET, i),
            alt_target: derive_seed(master, TAG_ALT_TARGET, i),
            discovery: derive_seed(master, TAG_DISCOVERY, i),
            train: derive_seed(master, TAG_TRAIN, i),
            random: derive_seed(master, TAG_RANDOM, i),
            aux: derive_seed(master, TAG_AUX, i),
        }
    }

    pub fn random_for(&self, k: usize) -> u64 {
        derive_seed(self.random, 0, k as u64)
    }

    pub fn aux_for(&self, index: u64) -> u64 {
        derive_seed(self.aux, 0, index)
    }
}

/// The task of replicate `plan`, with its teacher drawn from `target_seed`.
pub fn replicate_task(cfg: &ExperimentConfig, plan: &SeedPlan, target_seed: u64) -> Result<TaskInstance> {
    let mut spec = cfg.task.clone();
    spec.seed = target_seed;
    make_task(&spec, &mut SeededRng::new(plan.base))
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {jobs} worker threads: {e}")))
}
