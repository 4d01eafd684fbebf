//! Informed vs random placement across budgets, on one seed and a
//! shortened noisy schedule. The `sweep` command runs the full grid.
//!
//!     cargo run --release --example budget_sweep

use std::error::Error;

use circuit_seed::discovery::{discover, random_circuit, DiscoveryConfig, Method};
use circuit_seed::rng::SeededRng;
use circuit_seed::task::{make_task, TargetSpec};
use circuit_seed::training::{train, Regime, TrainConfig};

fn main() -> Result<(), Box<dyn Error>> {
    let task = make_task(&TargetSpec::sparse(0), &mut SeededRng::new(1))?;
    let mut cfg = TrainConfig::for_regime(Regime::Noisy, 3);
    cfg.steps = 4000;
    cfg.eval_every = 1000;

    println!("{:>5} {:>9} {:>9}", "k", "s_hat", "random");
    for k in [20, 102, 512] {
        let (informed, _) = discover(&task.base, &task, &DiscoveryConfig::new(Method::SHat, k, 2))?;
        let random = random_circuit(k, 64, 16, &mut SeededRng::new(5))?;
        let mse = |c: &circuit_seed::discovery::Circuit| -> Result<f64, Box<dyn Error>> {
            let run = train(&task, &cfg.clone().with_mask(c.to_mask(64, 16)?))?;
            Ok(run.report.final_relative_mse)
        };
        println!("{k:>5} {:>9.4} {:>9.4}", mse(&informed)?, mse(&random)?);
    }
    Ok(())
}
