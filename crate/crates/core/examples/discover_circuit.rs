//! Score the adapter entries of a fresh model on the sparse task and pick
//! the top 51 by gradient magnitude.
//!
//!     cargo run --release --example discover_circuit

use std::collections::HashSet;
use std::error::Error;

use circuit_seed::discovery::{discover, DiscoveryConfig, Method};
use circuit_seed::rng::SeededRng;
use circuit_seed::task::{make_task, TargetSpec};

fn main() -> Result<(), Box<dyn Error>> {
    let task = make_task(&TargetSpec::sparse(0), &mut SeededRng::new(1))?;
    let support: HashSet<(usize, usize)> = task.large_support.iter().copied().collect();

    for method in [Method::SHat, Method::FHat, Method::Magnitude, Method::Random] {
        let (circuit, _) = discover(&task.base, &task, &DiscoveryConfig::new(method, 51, 7))?;
        let hits = circuit.coords().filter(|c| support.contains(c)).count();
        println!("{:>10}: {hits:>2}/51 entries on the teacher's support", method.as_str());
    }

    let (circuit, _) = discover(&task.base, &task, &DiscoveryConfig::new(Method::SHat, 51, 7))?;
    println!("\ntop entries by s_hat:");
    for e in circuit.entries.iter().take(5) {
        println!("  B[{:>2}, {:>2}]  {:.3e}", e.row(), e.col(), e.score());
    }
    Ok(())
}
