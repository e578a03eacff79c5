//! Closed loop over the two-state Markov channel. The controller is designed
//! for the mean success rate while the dropouts follow the chain.

use erasure_smpc::simulator::{run_paths_with, Controller, SimConfig};
use erasure_smpc::{ChannelModel, Protocol};

fn main() -> erasure_smpc::Result<()> {
    let paths: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(100);
    let channel = ChannelModel::good_bad_example();
    println!("mean success rate {:.3}", channel.mean_success_rate());
    let base = SimConfig { paths, channel, ..SimConfig::example(Protocol::Tp1) };
    let moments = base.estimate_noise_moments(None)?;
    for protocol in Protocol::ALL {
        let cfg = SimConfig { protocol, ..base.clone() };
        let (_, m) = run_paths_with(&Controller::design(&cfg, &moments)?, &cfg)?;
        println!("{}: cost/stage {:8.2}  energy {:6.2}", protocol.name(), m.avg_cost_per_stage, m.actuator_energy);
    }
    Ok(())
}
