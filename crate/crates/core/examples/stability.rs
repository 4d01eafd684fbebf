//! Circuit stability under fewer scoring passes, perturbed `A`, and a
//! different teacher. Writes its tables under the system temp directory.
//!
//!     cargo run --release --example stability

use std::error::Error;

use circuit_seed::experiment::{run_stability, ExperimentConfig};

fn main() -> Result<(), Box<dyn Error>> {
    let mut cfg = ExperimentConfig::default();
    cfg.experiment = "stability-example".into();
    cfg.out = std::env::temp_dir().join("circuit-seed");
    cfg.seeds = 3;
    let report = run_stability(&cfg)?;

    for n in &cfg.stability_ns {
        println!("N = {n:>3} vs N = {}: overlap {:.3}", cfg.stability_reference_n, report.mc_mean(*n).unwrap_or(f64::NAN));
    }
    for eps in &cfg.epsilons {
        println!("eps = {eps:<5} overlap {:.3}", report.perturbation_mean(*eps).unwrap_or(f64::NAN));
    }
    println!("other teacher: overlap {:.3} (chance {:.3})", report.cross_target_mean().unwrap_or(f64::NAN), report.cross_target[0].chance);
    println!("tables in {}", cfg.out.join(&cfg.experiment).join("stability").display());
    Ok(())
}
