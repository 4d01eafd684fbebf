use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{Budget, ExperimentConfig, KnockoutModel, TraceMode};
use super::output::{ensure_dir, read_json, write_csv, write_json, write_score_histogram, MetricsWriter, SweepRow, SweepTable, K_ROUNDING};
use super::{pool, replicate_task, Outcome, SeedPlan};
use crate::diagnostics::{
    init_gradient_trace, knockout_sweep, per_example_gradients, sign_consistency, signal_retention, structure_report,
    svd_alignment, Alignment, GradientTrace, StructureReport,
};
use crate::discovery::{
    accumulate, accumulate_factor, accumulate_nested, overlap, perturb_a, random_circuit, score, score_with, select_top_k,
    Circuit, Factor, GradStats, Method,
};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::mask::Mask;
use crate::rng::SeededRng;
use crate::task::TaskInstance;
use crate::training::{train, train_with_sink, update_energy, ATraining, Regime};

struct Replicate {
    plan: SeedPlan,
    task: TaskInstance,
    stats: Option<GradStats>,
}

fn experiment_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out.join(&cfg.experiment)
}

fn total(cfg: &ExperimentConfig) -> usize {
    cfg.task.dims.b_entries()
}

fn b_shape(cfg: &ExperimentConfig) -> (usize, usize) {
    (cfg.task.dims.hidden, cfg.task.dims.rank)
}

fn par_map<T: Sync, R: Send>(cfg: &ExperimentConfig, items: &[T], f: impl Fn(&T) -> Result<R> + Sync + Send) -> Result<Vec<R>> {
    pool(cfg.jobs)?.install(|| items.par_iter().map(f).collect())
}

fn build_replicates(cfg: &ExperimentConfig, with_stats: bool) -> Result<Vec<Replicate>> {
    let idx: Vec<usize> = (0..cfg.seeds).collect();
    par_map(cfg, &idx, |&i| {
        let plan = SeedPlan::new(cfg.master_seed, i);
        let task = replicate_task(cfg, &plan, plan.target)?;
        let stats = if with_stats {
            let mut rng = SeededRng::new(plan.discovery);
            Some(accumulate(&task.base, &task, cfg.n_passes, cfg.discovery_batch, &mut rng)?)
        } else {
            None
        };
        Ok(Replicate { plan, task, stats })
    })
}

fn needs_stats(methods: &[Method]) -> bool {
    methods.iter().any(Method::uses_gradients)
}

fn circuit_for(cfg: &ExperimentConfig, rep: &Replicate, method: Method, k: usize) -> Result<Circuit> {
    let (rows, cols) = b_shape(cfg);
    if method == Method::Random {
        let seed = rep.plan.random_for(k);
        return Ok(random_circuit(k, rows, cols, &mut SeededRng::new(seed))?.with_provenance(seed, 0));
    }
    let stats = if method.uses_gradients() { rep.stats.as_ref() } else { None };
    let scores = score_with(stats, method, &rep.task.base)?;
    let passes = if stats.is_some() { cfg.n_passes } else { 0 };
    Ok(select_top_k(&scores, k, method)?.with_provenance(rep.plan.discovery, passes))
}

fn status_of(e: &Error) -> String {
    match e {
        Error::Diverged { step } => format!("diverged@{step}"),
        Error::InvalidArgument(m) => format!("invalid: {m}"),
        other => format!("error: {other}"),
    }
}

fn is_fatal(e: &Error) -> bool {
    matches!(e, Error::Io { .. } | Error::Csv(_) | Error::Serde(_))
}

// ---------------------------------------------------------------------------
// discover

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DiscoverRow {
    method: String,
    fraction: f64,
    k: usize,
    seed: usize,
    top_score: f64,
    in_large_support: usize,
    status: String,
}

pub fn cmd_discover(cfg: &ExperimentConfig) -> Result<Outcome> {
    let dir = experiment_dir(cfg);
    let reps = build_replicates(cfg, needs_stats(&cfg.methods))?;
    let mut cells = Vec::new();
    for &m in &cfg.methods {
        for b in &cfg.budgets {
            for r in 0..reps.len() {
                cells.push((m, *b, r));
            }
        }
    }
    let rows = par_map(cfg, &cells, |&(method, budget, r)| {
        let rep = &reps[r];
        let k = budget.resolve(total(cfg));
        let cell = dir.join(method.as_str()).join(budget.label()).join(r.to_string());
        write_json(&cell.join("task_manifest.json"), &rep.task.manifest())?;
        let mut row = DiscoverRow {
            method: method.to_string(),
            fraction: budget.fraction(total(cfg)),
            k,
            seed: r,
            top_score: f64::NAN,
            in_large_support: 0,
            status: "ok".into(),
        };
        match circuit_for(cfg, rep, method, k) {
            Ok(c) => {
                write_json(&cell.join("circuit.json"), &c)?;
                if method != Method::Random {
                    let stats = if method.uses_gradients() { rep.stats.as_ref() } else { None };
                    write_score_histogram(&cell.join("score_hist.csv"), &score_with(stats, method, &rep.task.base)?)?;
                }
                row.top_score = c.entries.first().map_or(f64::NAN, |e| e.score());
                row.in_large_support = c.coords().filter(|p| rep.task.large_support.contains(p)).count();
            }
            Err(e) if is_fatal(&e) => return Err(e),
            Err(e) => row.status = status_of(&e),
        }
        Ok(row)
    })?;
    write_csv(&dir.join("discover.csv"), &[K_ROUNDING], &rows)?;
    let mut summary = format!("{} circuits written under {}\n", rows.len(), dir.display());
    for r in rows.iter().filter(|r| r.status != "ok") {
        let _ = writeln!(summary, "  {} k={} seed={}: {}", r.method, r.k, r.seed, r.status);
    }
    Ok(Outcome {
        summary,
        diverged: 0,
        out_dir: dir,
    })
}

// ---------------------------------------------------------------------------
// train / sweep

const FULL_LORA: &str = "full_lora";

fn run_cell(cfg: &ExperimentConfig, rep: &Replicate, method: Option<Method>, budget: Budget, dir: &Path) -> Result<SweepRow> {
    let k = budget.resolve(total(cfg));
    let label = method.map_or(FULL_LORA, |m| m.as_str());
    let cell = dir.join(label).join(budget.label()).join(rep.plan.index.to_string());
    write_json(&cell.join("task_manifest.json"), &rep.task.manifest())?;
    let mut row = SweepRow {
        method: label.into(),
        fraction: budget.fraction(total(cfg)),
        k,
        seed: rep.plan.index,
        relative_mse: f64::NAN,
        status: "ok".into(),
    };
    let base = cfg.train_config(cfg.regime(), rep.plan.train);
    let tc = match method {
        None => base.full_lora(),
        Some(m) => match circuit_for(cfg, rep, m, k) {
            Ok(c) => {
                write_json(&cell.join("circuit.json"), &c)?;
                let (rows, cols) = b_shape(cfg);
                base.with_mask(c.to_mask(rows, cols)?)
            }
            Err(e) if is_fatal(&e) => return Err(e),
            Err(e) => {
                row.status = status_of(&e);
                return Ok(row);
            }
        },
    };
    let mut metrics = MetricsWriter::create(&cell.join("metrics.csv"))?;
    match train_with_sink(&rep.task, &tc, |r| metrics.push(r)) {
        Ok(run) => {
            write_json(&cell.join("report.json"), &run.report)?;
            row.relative_mse = run.report.final_relative_mse;
        }
        Err(e) if is_fatal(&e) => return Err(e),
        Err(e) => row.status = status_of(&e),
    }
    Ok(row)
}

fn run_grid(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    let dir = experiment_dir(cfg);
    let reps = build_replicates(cfg, needs_stats(&cfg.methods))?;
    let mut cells: Vec<(Option<Method>, Budget, usize)> = Vec::new();
    for &m in &cfg.methods {
        for b in &cfg.budgets {
            for r in 0..reps.len() {
                cells.push((Some(m), *b, r));
            }
        }
    }
    if cfg.full_lora {
        for r in 0..reps.len() {
            cells.push((None, Budget::Fraction(1.0), r));
        }
    }
    par_map(cfg, &cells, |&(m, b, r)| run_cell(cfg, &reps[r], m, b, &dir))
}

fn grid_summary(table: &SweepTable) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<12} {:>6} {:>10} {:>10} {:>10} {:>4} {:>6}", "method", "k", "mean", "min", "max", "n", "failed");
    for a in &table.aggregate {
        let _ = writeln!(
            s,
            "{:<12} {:>6} {:>10.4} {:>10.4} {:>10.4} {:>4} {:>6}",
            a.method, a.k, a.mean, a.min, a.max, a.n, a.failed
        );
    }
    s
}

fn diverged_count(rows: &[SweepRow]) -> usize {
    rows.iter().filter(|r| r.status.starts_with("diverged")).count()
}

/// Trains every `(method, budget, seed)` cell and writes the per-run files.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<Outcome> {
    let rows = run_grid(cfg)?;
    let table = SweepTable::new(&cfg.experiment, cfg.task.kind.as_str(), cfg.regime().as_str(), rows);
    Ok(Outcome {
        summary: grid_summary(&table),
        diverged: diverged_count(&table.rows),
        out_dir: experiment_dir(cfg),
    })
}

/// Runs the full grid and returns the sweep table, also written to
/// `sweep.csv`, `aggregate.csv` and `sweep.json`.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepTable> {
    let rows = run_grid(cfg)?;
    let table = SweepTable::new(&cfg.experiment, cfg.task.kind.as_str(), cfg.regime().as_str(), rows);
    table.write(&experiment_dir(cfg))?;
    Ok(table)
}

pub fn cmd_sweep(cfg: &ExperimentConfig) -> Result<Outcome> {
    let table = run_sweep(cfg)?;
    Ok(Outcome {
        summary: grid_summary(&table),
        diverged: diverged_count(&table.rows),
        out_dir: experiment_dir(cfg),
    })
}

// ---------------------------------------------------------------------------
// knockout

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KnockoutRow {
    pub seed: usize,
    pub fraction: f64,
    pub circuit_mse: f64,
    pub random_mse: f64,
}

fn knockout_rows(cfg: &ExperimentConfig, rep: &Replicate, trained: &crate::model::AdaptedModel) -> Result<Vec<KnockoutRow>> {
    let scores = score_with(rep.stats.as_ref(), cfg.knockout_method, &rep.task.base)?;
    let curves = knockout_sweep(trained, &scores, &cfg.knockout_fractions, &rep.task, cfg.knockout_seed)?;
    Ok(curves
        .circuit
        .iter()
        .zip(&curves.random)
        .map(|(c, r)| KnockoutRow {
            seed: rep.plan.index,
            fraction: c.fraction_zeroed,
            circuit_mse: c.relative_mse,
            random_mse: r.relative_mse,
        })
        .collect())
}

fn mean_knockout(cfg: &ExperimentConfig, rows: &[KnockoutRow]) -> Vec<KnockoutMean> {
    cfg.knockout_fractions
        .iter()
        .map(|&f| {
            let at: Vec<&KnockoutRow> = rows.iter().filter(|r| r.fraction == f).collect();
            let n = at.len().max(1) as f64;
            KnockoutMean {
                fraction: f,
                circuit_mse: at.iter().map(|r| r.circuit_mse).sum::<f64>() / n,
                random_mse: at.iter().map(|r| r.random_mse).sum::<f64>() / n,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KnockoutMean {
    pub fraction: f64,
    pub circuit_mse: f64,
    pub random_mse: f64,
}

/// Trains a full adapter per seed and knocks out its top-scored entries.
pub fn run_knockout(cfg: &ExperimentConfig) -> Result<Vec<KnockoutRow>> {
    let dir = experiment_dir(cfg).join("knockout");
    let needs = cfg.knockout_method.uses_gradients();
    let reps = build_replicates(cfg, needs)?;
    let per_seed = par_map(cfg, &reps, |rep| {
        let base = cfg.train_config(cfg.regime(), rep.plan.train);
        let tc = match cfg.knockout_model {
            KnockoutModel::FullLora => base.full_lora(),
            KnockoutModel::FullB => base,
        };
        let run = train(&rep.task, &tc)?;
        let rows = knockout_rows(cfg, rep, &run.model)?;
        write_csv(&dir.join(rep.plan.index.to_string()).join("knockout.csv"), &[], &rows)?;
        Ok(rows)
    })?;
    let rows: Vec<KnockoutRow> = per_seed.into_iter().flatten().collect();
    write_csv(&dir.join("knockout.csv"), &[], &rows)?;
    write_csv(&dir.join("knockout_mean.csv"), &[], &mean_knockout(cfg, &rows))?;
    Ok(rows)
}

pub fn cmd_knockout(cfg: &ExperimentConfig) -> Result<Outcome> {
    let rows = run_knockout(cfg)?;
    let mut summary = format!("{:>8} {:>12} {:>12}\n", "fraction", "circuit", "random");
    for m in mean_knockout(cfg, &rows) {
        let _ = writeln!(summary, "{:>8} {:>12.4} {:>12.4}", m.fraction, m.circuit_mse, m.random_mse);
    }
    Ok(Outcome {
        summary,
        diverged: 0,
        out_dir: experiment_dir(cfg).join("knockout"),
    })
}

// ---------------------------------------------------------------------------
// diagnose

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetentionReport {
    pub k: usize,
    /// Retention of the `s_hat` circuit on the mean initial gradient.
    pub informed: f64,
    /// Retention of a size-matched random mask on the same gradient.
    pub random: f64,
    /// `k / |B|`, the expectation for a random mask.
    pub expected_random: f64,
    /// Mean retention of the circuit on individual trace gradients.
    pub per_step_informed: f64,
    pub per_step_random: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignReport {
    pub samples: usize,
    pub circuit_mean: f64,
    pub outside_mean: f64,
    /// Over the large entries of the sparse teacher, when it has them.
    pub support_mean: Option<f64>,
    pub off_support_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeDiagnostics {
    pub schema_version: u32,
    pub regime: Regime,
    pub seed: usize,
    pub trace_mode: String,
    pub structure: StructureReport,
    pub structure_at_init: StructureReport,
    pub structure_trajectory: StructureReport,
    pub retention: RetentionReport,
    pub update_energy: f64,
    pub knockout: Vec<KnockoutMean>,
    pub alignment: Alignment,
    pub sign_consistency: SignReport,
    pub final_relative_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseRow {
    pub regime: String,
    /// Empty for seed-mean rows.
    pub seed: Option<usize>,
    pub effective_rank: f64,
    pub mean_cosine: f64,
    pub accumulation_efficiency: f64,
    pub retention_informed: f64,
    pub retention_random: f64,
    pub update_energy: f64,
    pub left_align: f64,
    pub spectral_ratio: f64,
    pub final_relative_mse: f64,
}

impl DiagnoseRow {
    fn of(d: &RegimeDiagnostics) -> Self {
        Self {
            regime: d.regime.as_str().into(),
            seed: Some(d.seed),
            effective_rank: d.structure.effective_rank,
            mean_cosine: d.structure.mean_cosine,
            accumulation_efficiency: d.structure.accumulation_efficiency,
            retention_informed: d.retention.informed,
            retention_random: d.retention.random,
            update_energy: d.update_energy,
            left_align: d.alignment.left_align,
            spectral_ratio: d.alignment.spectral_ratio,
            final_relative_mse: d.final_relative_mse,
        }
    }

    fn mean(regime: &str, rows: &[DiagnoseRow]) -> Self {
        let n = rows.len().max(1) as f64;
        let avg = |f: fn(&DiagnoseRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        Self {
            regime: regime.into(),
            seed: None,
            effective_rank: avg(|r| r.effective_rank),
            mean_cosine: avg(|r| r.mean_cosine),
            accumulation_efficiency: avg(|r| r.accumulation_efficiency),
            retention_informed: avg(|r| r.retention_informed),
            retention_random: avg(|r| r.retention_random),
            update_energy: avg(|r| r.update_energy),
            left_align: avg(|r| r.left_align),
            spectral_ratio: avg(|r| r.spectral_ratio),
            final_relative_mse: avg(|r| r.final_relative_mse),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub schema_version: u32,
    pub experiment: String,
    pub runs: Vec<RegimeDiagnostics>,
    /// One seed-mean row per regime.
    pub summary: Vec<DiagnoseRow>,
}

impl DiagnosticsReport {
    pub fn mean(&self, regime: Regime) -> Option<&DiagnoseRow> {
        self.summary.iter().find(|r| r.regime == regime.as_str())
    }
}

fn masked_mean(values: &Matrix, mask: &Mask) -> f64 {
    let v = values.as_slice();
    mask.indices().map(|i| v[i]).sum::<f64>() / mask.k().max(1) as f64
}

fn diagnose_one(cfg: &ExperimentConfig, rep: &Replicate, regime: Regime) -> Result<RegimeDiagnostics> {
    let (rows, cols) = b_shape(cfg);
    let d = rows * cols;
    let k = cfg.diagnose_k;
    let stats = rep.stats.as_ref().expect("diagnose builds statistics");
    let circuit = select_top_k(&score(stats, Method::SHat, &rep.task.base)?, k, Method::SHat)?.to_mask(rows, cols)?;
    let random = random_circuit(k, rows, cols, &mut SeededRng::new(rep.plan.random_for(k)))?.to_mask(rows, cols)?;

    let mut tc = cfg.train_config(regime, rep.plan.train);
    tc.trace = Some(cfg.trace);
    let run = train(&rep.task, &tc)?;
    let log = run.report.gradient_log.clone().unwrap_or_default();
    let trajectory = GradientTrace::new(log)?;
    let at_init = init_gradient_trace(&rep.task, &tc, cfg.trace.count, &mut SeededRng::new(rep.plan.aux_for(1)))?;
    let estimator = cfg.rank_estimator;
    let report_of = |t: &GradientTrace| -> Result<StructureReport> {
        let mut s = structure_report(t)?;
        s.effective_rank = crate::diagnostics::effective_rank_with(t, estimator)?;
        Ok(s)
    };
    let structure_at_init = report_of(&at_init)?;
    let structure_trajectory = report_of(&trajectory)?;
    let (structure, mode_trace) = match cfg.trace_mode {
        TraceMode::AtInit => (structure_at_init, &at_init),
        TraceMode::Trajectory => (structure_trajectory, &trajectory),
    };

    let mean_g = stats.mean();
    let per_step = |m: &Mask| -> Result<f64> {
        let v = mode_trace.vectors();
        let vals: Vec<f64> = v.iter().filter_map(|g| signal_retention(g, m).ok()).collect();
        Ok(vals.iter().sum::<f64>() / vals.len().max(1) as f64)
    };
    let retention = RetentionReport {
        k,
        informed: signal_retention(mean_g.as_slice(), &circuit)?,
        random: signal_retention(mean_g.as_slice(), &random)?,
        expected_random: k as f64 / d as f64,
        per_step_informed: per_step(&circuit)?,
        per_step_random: per_step(&random)?,
    };

    let samples = per_example_gradients(&rep.task.base, &rep.task, cfg.sign_samples, &mut SeededRng::new(rep.plan.aux_for(2)))?;
    let consistency = sign_consistency(&samples)?;
    let support = if rep.task.large_support.is_empty() {
        None
    } else {
        Some(Mask::from_coords(rows, cols, rep.task.large_support.iter().copied())?)
    };
    let sign = SignReport {
        samples: cfg.sign_samples,
        circuit_mean: masked_mean(&consistency, &circuit),
        outside_mean: masked_mean(&consistency, &circuit.complement()),
        support_mean: support.as_ref().map(|m| masked_mean(&consistency, m)),
        off_support_mean: support.as_ref().map(|m| masked_mean(&consistency, &m.complement())),
    };

    let ko = knockout_rows(cfg, rep, &run.model)?;
    Ok(RegimeDiagnostics {
        schema_version: crate::SCHEMA_VERSION,
        regime,
        seed: rep.plan.index,
        trace_mode: match cfg.trace_mode {
            TraceMode::AtInit => "at_init".into(),
            TraceMode::Trajectory => "trajectory".into(),
        },
        structure,
        structure_at_init,
        structure_trajectory,
        retention,
        update_energy: update_energy(&run.model.b, &circuit, &random)?,
        knockout: ko
            .iter()
            .map(|r| KnockoutMean {
                fraction: r.fraction,
                circuit_mse: r.circuit_mse,
                random_mse: r.random_mse,
            })
            .collect(),
        alignment: svd_alignment(&run.model.delta_w(), &rep.task.base.w1, cfg.alignment_rank)?,
        sign_consistency: sign,
        final_relative_mse: run.report.final_relative_mse,
    })
}

/// Gradient-structure, retention, update-energy, knockout, sign and
/// alignment diagnostics for each seed, in one regime (when the config
/// names one) or both.
pub fn run_diagnose(cfg: &ExperimentConfig) -> Result<DiagnosticsReport> {
    let dir = experiment_dir(cfg).join("diagnose");
    let regimes = match cfg.regime {
        Some(r) => vec![r],
        None => vec![Regime::Clean, Regime::Noisy],
    };
    let reps = build_replicates(cfg, true)?;
    let cells: Vec<(Regime, usize)> = regimes.iter().flat_map(|&g| (0..reps.len()).map(move |r| (g, r))).collect();
    let runs = par_map(cfg, &cells, |&(regime, r)| {
        let d = diagnose_one(cfg, &reps[r], regime)?;
        let cell = dir.join(regime.as_str()).join(r.to_string());
        write_json(&cell.join("diagnostics.json"), &d)?;
        write_csv(&cell.join("knockout.csv"), &[], &d.knockout)?;
        Ok(d)
    })?;
    let rows: Vec<DiagnoseRow> = runs.iter().map(DiagnoseRow::of).collect();
    let summary: Vec<DiagnoseRow> = regimes
        .iter()
        .map(|g| {
            let of: Vec<DiagnoseRow> = rows.iter().filter(|r| r.regime == g.as_str()).cloned().collect();
            DiagnoseRow::mean(g.as_str(), &of)
        })
        .collect();
    let mut table = rows;
    table.extend(summary.iter().cloned());
    write_csv(&dir.join("diagnose.csv"), &[], &table)?;
    let report = DiagnosticsReport {
        schema_version: crate::SCHEMA_VERSION,
        experiment: cfg.experiment.clone(),
        runs,
        summary,
    };
    write_json(&dir.join("diagnose_summary.json"), &report.summary)?;
    Ok(report)
}

pub fn cmd_diagnose(cfg: &ExperimentConfig) -> Result<Outcome> {
    let report = run_diagnose(cfg)?;
    let mut summary = format!(
        "{:<6} {:>9} {:>8} {:>8} {:>10} {:>10} {:>10}\n",
        "regime", "eff_rank", "cosine", "accum", "retention", "energy", "left_align"
    );
    for r in &report.summary {
        let _ = writeln!(
            summary,
            "{:<6} {:>9.3} {:>8.3} {:>8.3} {:>10.3} {:>10.3} {:>10.3}",
            r.regime, r.effective_rank, r.mean_cosine, r.accumulation_efficiency, r.retention_informed, r.update_energy, r.left_align
        );
    }
    Ok(Outcome {
        summary,
        diverged: 0,
        out_dir: experiment_dir(cfg).join("diagnose"),
    })
}

// ---------------------------------------------------------------------------
// stability

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McRow {
    pub seed: usize,
    pub n_passes: usize,
    pub overlap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationRow {
    pub seed: usize,
    pub epsilon: f64,
    pub overlap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossTargetRow {
    pub seed: usize,
    pub k: usize,
    pub overlap: f64,
    pub chance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub schema_version: u32,
    pub method: Method,
    pub k: usize,
    pub reference_n: usize,
    pub mc: Vec<McRow>,
    pub perturbation: Vec<PerturbationRow>,
    pub cross_target: Vec<CrossTargetRow>,
}

impl StabilityReport {
    pub fn mc_mean(&self, n: usize) -> Option<f64> {
        mean_of(self.mc.iter().filter(|r| r.n_passes == n).map(|r| r.overlap))
    }

    pub fn perturbation_mean(&self, epsilon: f64) -> Option<f64> {
        mean_of(self.perturbation.iter().filter(|r| r.epsilon == epsilon).map(|r| r.overlap))
    }

    pub fn cross_target_mean(&self) -> Option<f64> {
        mean_of(self.cross_target.iter().map(|r| r.overlap))
    }
}

fn mean_of(it: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = it.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn stability_method(cfg: &ExperimentConfig) -> Method {
    cfg.methods.iter().copied().find(Method::uses_gradients).unwrap_or(Method::SHat)
}

/// Circuit agreement under fewer scoring passes, under perturbations of
/// `A`, and across teachers sharing a base model.
pub fn run_stability(cfg: &ExperimentConfig) -> Result<StabilityReport> {
    let dir = experiment_dir(cfg).join("stability");
    let method = stability_method(cfg);
    let k = cfg.stability_k;
    let total = total(cfg);
    let idx: Vec<usize> = (0..cfg.seeds).collect();
    let parts = par_map(cfg, &idx, |&i| {
        let plan = SeedPlan::new(cfg.master_seed, i);
        let task = replicate_task(cfg, &plan, plan.target)?;
        let mut checkpoints = cfg.stability_ns.clone();
        checkpoints.push(cfg.stability_reference_n);
        let snaps = accumulate_nested(&task.base, &task, &checkpoints, cfg.discovery_batch, &mut SeededRng::new(plan.discovery))?;
        let circuit_of = |s: &GradStats, model: &crate::model::AdaptedModel| -> Result<Circuit> {
            select_top_k(&score(s, method, model)?, k, method)
        };
        let reference = circuit_of(snaps.last().expect("reference"), &task.base)?;
        let mc = cfg
            .stability_ns
            .iter()
            .zip(&snaps)
            .map(|(&n, s)| {
                Ok(McRow {
                    seed: i,
                    n_passes: n,
                    overlap: overlap(&circuit_of(s, &task.base)?, &reference)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let perturbation = cfg
            .epsilons
            .iter()
            .enumerate()
            .map(|(j, &eps)| {
                let perturbed = perturb_a(&task.base, eps, &mut SeededRng::new(plan.aux_for(100 + j as u64)))?;
                let s = accumulate(&perturbed, &task, cfg.stability_reference_n, cfg.discovery_batch, &mut SeededRng::new(plan.discovery))?;
                Ok(PerturbationRow {
                    seed: i,
                    epsilon: eps,
                    overlap: overlap(&circuit_of(&s, &perturbed)?, &reference)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let other = replicate_task(cfg, &plan, plan.alt_target)?;
        let s = accumulate(&other.base, &other, cfg.stability_reference_n, cfg.discovery_batch, &mut SeededRng::new(plan.discovery))?;
        let cross = CrossTargetRow {
            seed: i,
            k,
            overlap: overlap(&circuit_of(&s, &other.base)?, &reference)?,
            chance: k as f64 / total as f64,
        };
        Ok((mc, perturbation, cross))
    })?;
    let mut report = StabilityReport {
        schema_version: crate::SCHEMA_VERSION,
        method,
        k,
        reference_n: cfg.stability_reference_n,
        mc: Vec::new(),
        perturbation: Vec::new(),
        cross_target: Vec::new(),
    };
    for (mc, p, c) in parts {
        report.mc.extend(mc);
        report.perturbation.extend(p);
        report.cross_target.push(c);
    }
    write_csv(&dir.join("mc_convergence.csv"), &[], &report.mc)?;
    write_csv(&dir.join("perturbation.csv"), &[], &report.perturbation)?;
    write_csv(&dir.join("cross_target.csv"), &[], &report.cross_target)?;
    write_json(&dir.join("stability.json"), &report)?;
    Ok(report)
}

pub fn cmd_stability(cfg: &ExperimentConfig) -> Result<Outcome> {
    let r = run_stability(cfg)?;
    let mut summary = format!("{} circuits, k = {}, reference N = {}\n", r.method, r.k, r.reference_n);
    for &n in &cfg.stability_ns {
        let _ = writeln!(summary, "  N = {n:<4} overlap {:.3}", r.mc_mean(n).unwrap_or(f64::NAN));
    }
    for &e in &cfg.epsilons {
        let _ = writeln!(summary, "  eps = {e:<5} overlap {:.3}", r.perturbation_mean(e).unwrap_or(f64::NAN));
    }
    let _ = writeln!(
        summary,
        "  cross-target overlap {:.3} (chance {:.3})",
        r.cross_target_mean().unwrap_or(f64::NAN),
        r.k as f64 / total(cfg) as f64
    );
    Ok(Outcome {
        summary,
        diverged: 0,
        out_dir: experiment_dir(cfg).join("stability"),
    })
}

// ---------------------------------------------------------------------------
// A+B ablation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub k: usize,
    pub seed: usize,
    pub b_only: f64,
    pub a_plus_b: f64,
    /// `‖A₁ − A₀‖_F` after the first step of the A+B run.
    pub a_step1_displacement: f64,
    pub status: String,
}

/// B-only placement against a split budget: `k/2` entries of `B` chosen at
/// initialization and `k/2` entries of `A` chosen after a short B-only
/// warm-up. Both runs start from `B = 0`.
pub fn run_ablate_ab(cfg: &ExperimentConfig) -> Result<Vec<AblationRow>> {
    let dir = experiment_dir(cfg).join("ablate_ab");
    let ks: Vec<usize> = cfg.budgets.iter().map(|b| b.resolve(total(cfg))).collect();
    if let Some(k) = ks.iter().find(|k| *k % 2 == 1 || **k == 0) {
        return Err(Error::invalid(format!("A+B ablation splits k in half; k = {k} is odd or zero")));
    }
    let (rows, cols) = b_shape(cfg);
    let (ar, ac) = (cfg.task.dims.rank, cfg.task.dims.input);
    let reps = build_replicates(cfg, true)?;
    let cells: Vec<(usize, usize)> = ks.iter().flat_map(|&k| (0..reps.len()).map(move |r| (k, r))).collect();
    let out = par_map(cfg, &cells, |&(k, r)| {
        let rep = &reps[r];
        let s_b = score(rep.stats.as_ref().expect("built"), Method::SHat, &rep.task.base)?;
        let base = cfg.train_config(cfg.regime(), rep.plan.train);
        let mut row = AblationRow {
            k,
            seed: r,
            b_only: f64::NAN,
            a_plus_b: f64::NAN,
            a_step1_displacement: f64::NAN,
            status: "ok".into(),
        };
        let result = (|| -> Result<()> {
            let full = select_top_k(&s_b, k, Method::SHat)?.to_mask(rows, cols)?;
            row.b_only = train(&rep.task, &base.clone().with_mask(full))?.report.final_relative_mse;

            let half_b = select_top_k(&s_b, k / 2, Method::SHat)?.to_mask(rows, cols)?;
            let mut warm = base.clone().with_mask(half_b.clone());
            warm.steps = cfg.warmup_steps.max(1);
            let warmed = train(&rep.task, &warm)?.model;
            let a_stats = accumulate_factor(&warmed, &rep.task, cfg.n_passes, cfg.discovery_batch, &mut SeededRng::new(rep.plan.aux_for(3)), Factor::A)?;
            let s_a = a_stats.mean().map(f64::abs);
            let a_mask = select_top_k(&s_a, k / 2, Method::SHat)?.to_mask(ar, ac)?;

            let mut ab = base.clone().with_mask(half_b);
            ab.a_training = ATraining::Masked(a_mask);
            row.a_plus_b = train(&rep.task, &ab)?.report.final_relative_mse;
            let mut one = ab;
            one.steps = 1;
            let m1 = train(&rep.task, &one)?.model;
            row.a_step1_displacement = m1.a.sub(&rep.task.base.a)?.frobenius_norm();
            Ok(())
        })();
        match result {
            Ok(()) => {}
            Err(e) if is_fatal(&e) => return Err(e),
            Err(e) => row.status = status_of(&e),
        }
        Ok(row)
    })?;
    ensure_dir(&dir)?;
    write_csv(&dir.join("ablate_ab.csv"), &[], &out)?;
    write_json(&dir.join("ablate_ab.json"), &serde_json::json!({
        "schema_version": crate::SCHEMA_VERSION,
        "warmup_steps": cfg.warmup_steps,
        "rows": out,
    }))?;
    Ok(out)
}

pub fn cmd_ablate_ab(cfg: &ExperimentConfig) -> Result<Outcome> {
    let rows = run_ablate_ab(cfg)?;
    let mut ks: Vec<usize> = rows.iter().map(|r| r.k).collect();
    ks.dedup();
    let mut summary = format!("{:>6} {:>10} {:>10}\n", "k", "B only", "A+B");
    for k in ks {
        let ok: Vec<&AblationRow> = rows.iter().filter(|r| r.k == k && r.status == "ok").collect();
        let n = ok.len().max(1) as f64;
        let _ = writeln!(
            summary,
            "{:>6} {:>10.4} {:>10.4}",
            k,
            ok.iter().map(|r| r.b_only).sum::<f64>() / n,
            ok.iter().map(|r| r.a_plus_b).sum::<f64>() / n
        );
    }
    Ok(Outcome {
        summary,
        diverged: rows.iter().filter(|r| r.status.starts_with("diverged")).count(),
        out_dir: experiment_dir(cfg).join("ablate_ab"),
    })
}

// ---------------------------------------------------------------------------
// compare

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub schema_version: u32,
    pub a: PathBuf,
    pub b: PathBuf,
    pub method_a: Method,
    pub method_b: Method,
    pub k: usize,
    pub shared: usize,
    pub overlap: f64,
    /// Expected overlap of two independent random circuits, `k / |B|`.
    pub chance: f64,
}

/// Overlap of two circuit files.
pub fn cmd_compare(cfg: &ExperimentConfig, a: &Path, b: &Path) -> Result<Outcome> {
    let (rows, cols) = b_shape(cfg);
    let ca: Circuit = read_json(a)?;
    let cb: Circuit = read_json(b)?;
    ca.validate(rows, cols)?;
    cb.validate(rows, cols)?;
    let ov = overlap(&ca, &cb)?;
    let report = CompareReport {
        schema_version: crate::SCHEMA_VERSION,
        a: a.to_path_buf(),
        b: b.to_path_buf(),
        method_a: ca.method,
        method_b: cb.method,
        k: ca.k,
        shared: (ov * ca.k as f64).round() as usize,
        overlap: ov,
        chance: ca.k as f64 / (rows * cols) as f64,
    };
    let dir = experiment_dir(cfg);
    write_json(&dir.join("compare.json"), &report)?;
    Ok(Outcome {
        summary: format!(
            "{} vs {}: {} of {} shared (overlap {:.3}, chance {:.3})\n",
            report.method_a, report.method_b, report.shared, report.k, report.overlap, report.chance
        ),
        diverged: 0,
        out_dir: dir,
    })
}
