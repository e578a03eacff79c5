//! Compare the three transmission protocols on the three-state example plant
//! with an i.i.d. channel (success probability 0.8).

use std::time::Instant;

use erasure_smpc::simulator::{run_paths_with, Controller, SimConfig};
use erasure_smpc::Protocol;

fn main() -> erasure_smpc::Result<()> {
    let paths: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let base = SimConfig { paths, ..SimConfig::example(Protocol::Tp1) };
    let moments = base.estimate_noise_moments(None)?;
    println!("{:<5} {:>14} {:>14} {:>12} {:>10} {:>9}", "proto", "cost/stage", "energy", "msb", "iters", "seconds");
    for protocol in Protocol::ALL {
        let cfg = SimConfig { protocol, ..base.clone() };
        let start = Instant::now();
        let controller = Controller::design(&cfg, &moments)?;
        let (_, m) = run_paths_with(&controller, &cfg)?;
        println!(
            "{:<5} {:>14.3} {:>14.3} {:>12.3} {:>10.1} {:>9.2}   fallbacks {}",
            protocol.name(),
            m.avg_cost_per_stage,
            m.actuator_energy,
            m.empirical_msb,
            m.mean_iterations,
            start.elapsed().as_secs_f64(),
            m.fallbacks
        );
    }
    Ok(())
}
