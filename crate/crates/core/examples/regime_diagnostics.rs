//! Gradient-trace structure under the clean and noisy training regimes.
//!
//!     cargo run --release --example regime_diagnostics

use std::error::Error;

use circuit_seed::diagnostics::{init_gradient_trace, structure_report};
use circuit_seed::rng::SeededRng;
use circuit_seed::task::{make_task, TargetSpec};
use circuit_seed::training::{Regime, TrainConfig};

fn main() -> Result<(), Box<dyn Error>> {
    let task = make_task(&TargetSpec::sparse(0), &mut SeededRng::new(1))?;
    println!("{:>6} {:>8} {:>8} {:>10}", "regime", "rank", "cosine", "efficiency");
    for regime in [Regime::Clean, Regime::Noisy] {
        let cfg = TrainConfig::for_regime(regime, 0);
        let trace = init_gradient_trace(&task, &cfg, 50, &mut SeededRng::new(9))?;
        let s = structure_report(&trace)?;
        println!(
            "{:>6} {:>8.2} {:>8.3} {:>10.3}",
            regime.as_str(),
            s.effective_rank,
            s.mean_cosine,
            s.accumulation_efficiency
        );
    }
    Ok(())
}
