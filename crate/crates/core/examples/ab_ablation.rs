//! Spend a fixed budget on B alone, or split it between A and B.
//!
//!     cargo run --release --example ab_ablation

use std::error::Error;

use circuit_seed::experiment::{run_ablate_ab, Budget, ExperimentConfig};

fn main() -> Result<(), Box<dyn Error>> {
    let mut cfg = ExperimentConfig::default();
    cfg.experiment = "ablate-example".into();
    cfg.out = std::env::temp_dir().join("circuit-seed");
    cfg.seeds = 1;
    cfg.budgets = vec![Budget::Count(52), Budget::Count(204)];
    cfg.train.steps = Some(4000);

    println!("{:>5} {:>9} {:>9}", "k", "B only", "A + B");
    for row in run_ablate_ab(&cfg)? {
        println!("{:>5} {:>9.4} {:>9.4}", row.k, row.b_only, row.a_plus_b);
    }
    Ok(())
}
