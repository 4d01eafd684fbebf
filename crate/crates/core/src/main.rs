use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use circuit_seed::experiment::{self, Command, ExperimentConfig};
use circuit_seed::{Error, Result};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Cmd {
    Discover,
    Train,
    Sweep,
    Knockout,
    Diagnose,
    Stability,
    AblateAb,
    Compare,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Discover => Command::Discover,
            Cmd::Train => Command::Train,
            Cmd::Sweep => Command::Sweep,
            Cmd::Knockout => Command::Knockout,
            Cmd::Diagnose => Command::Diagnose,
            Cmd::Stability => Command::Stability,
            Cmd::AblateAb => Command::AblateAb,
            Cmd::Compare => Command::Compare,
        }
    }
}

/// Gradient-informed placement of sparse adapter parameters.
#[derive(Debug, Parser)]
#[command(name = "circuit-seed", version)]
struct Args {
    #[arg(value_enum)]
    command: Cmd,
    /// Flat `key = value` experiment file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long)]
    jobs: Option<usize>,
    /// Output root.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Scoring method(s), comma separated.
    #[arg(long)]
    method: Option<String>,
    /// Budget(s): fractions like `0.05` or entry counts like `51`.
    #[arg(long)]
    budget: Option<String>,
    /// `clean`, `noisy` or `auto`.
    #[arg(long)]
    regime: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Any other config key, as `key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Circuit files for `compare`.
    circuits: Vec<PathBuf>,
}

fn load(args: &Args) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    let flags: [(&str, Option<String>); 8] = [
        ("seed", args.seed.map(|v| v.to_string())),
        ("jobs", args.jobs.map(|v| v.to_string())),
        ("out", args.out.as_ref().map(|p| p.display().to_string())),
        ("methods", args.method.clone()),
        ("budgets", args.budget.clone()),
        ("regime", args.regime.clone()),
        ("steps", args.steps.map(|v| v.to_string())),
        ("lr", args.lr.map(|v| v.to_string())),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, &v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let args = Args::parse();
    let result = load(&args).and_then(|cfg| experiment::run(args.command.into(), &cfg, &args.circuits));
    match &result {
        Ok(o) => {
            print!("{}", o.summary);
            println!("results in {}", o.out_dir.display());
            if o.diverged > 0 {
                eprintln!("{} run(s) diverged", o.diverged);
            }
        }
        Err(e) => eprintln!("circuit-seed: {e}"),
    }
    ExitCode::from(experiment::exit_code(&result) as u8)
}
