//! Bisects the background Poisson weight for a target mean firing rate.

use sheaf_ode::graphs::generate_small_world;
use sheaf_ode::neurosim::{calibrate_poisson_weight, LifParams};

fn main() -> sheaf_ode::Result<()> {
    let target: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(20.0);
    let graph = generate_small_world(100, 8, 0.1, 0)?;
    let params = LifParams::default();
    let (w, rate) = calibrate_poisson_weight(&graph, &params, &[0, 1, 2, 3, 4], target, (0.0, 200.0), 16)?;
    println!("poisson_weight = {w:.3} pA -> mean rate {rate:.2} Hz (syn_weight {})", params.syn_weight);
    Ok(())
}
