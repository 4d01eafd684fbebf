//! Compare the analytic adapter gradients with central differences.
//!
//!     cargo run --release --example gradient_check

use std::error::Error;

use circuit_seed::model::{mse_loss, AdaptedModel, Batch};
use circuit_seed::rng::{gaussian_fill, kaiming_normal, SeededRng};

fn main() -> Result<(), Box<dyn Error>> {
    let mut rng = SeededRng::new(3);
    let mut m = AdaptedModel::new(
        kaiming_normal(&mut rng, 8, 6),
        kaiming_normal(&mut rng, 3, 8),
        kaiming_normal(&mut rng, 2, 6),
        1.0,
    )?;
    m.set_b(gaussian_fill(&mut rng, 8, 2, 0.0, 0.5)?)?;
    let batch = Batch::new(gaussian_fill(&mut rng, 6, 4, 0.0, 1.0)?, gaussian_fill(&mut rng, 3, 4, 0.0, 1.0)?)?;
    let g = m.backward(&batch)?;

    let h = 1e-5;
    let loss = |m: &AdaptedModel| mse_loss(&m.forward(&batch.x).unwrap(), &batch.y).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..m.b.len() {
        let (mut p, mut q) = (m.clone(), m.clone());
        p.b.as_mut_slice()[i] += h;
        q.b.as_mut_slice()[i] -= h;
        let numeric = (loss(&p) - loss(&q)) / (2.0 * h);
        worst = worst.max((g.d_b.as_slice()[i] - numeric).abs());
    }
    println!("loss {:.6}, max |grad B - finite difference| = {worst:.2e}", g.loss);
    Ok(())
}
