//! Train a full adapter, then zero the entries with the highest Fisher
//! score at initialization and compare against zeroing random entries.
//!
//!     cargo run --release --example knockout

use std::error::Error;

use circuit_seed::diagnostics::{knockout_sweep, KNOCKOUT_FRACTIONS};
use circuit_seed::discovery::{accumulate, score, Method};
use circuit_seed::rng::SeededRng;
use circuit_seed::task::{make_task, TargetSpec};
use circuit_seed::training::{train, Regime, TrainConfig};

fn main() -> Result<(), Box<dyn Error>> {
    let task = make_task(&TargetSpec::sparse(0), &mut SeededRng::new(1))?;
    let mut cfg = TrainConfig::for_regime(Regime::Noisy, 3).full_lora();
    cfg.steps = 5000;
    cfg.eval_every = 5000;
    let trained = train(&task, &cfg)?.model;

    // scores come from the untrained model, as during discovery
    let stats = accumulate(&task.base, &task, 100, 128, &mut SeededRng::new(4))?;
    let scores = score(&stats, Method::FHat, &task.base)?;
    let curves = knockout_sweep(&trained, &scores, &KNOCKOUT_FRACTIONS, &task, 42)?;

    println!("{:>8} {:>9} {:>9}", "zeroed", "circuit", "random");
    for (c, r) in curves.circuit.iter().zip(&curves.random) {
        println!("{:>8.3} {:>9.4} {:>9.4}", c.fraction_zeroed, c.relative_mse, r.relative_mse);
    }
    Ok(())
}
