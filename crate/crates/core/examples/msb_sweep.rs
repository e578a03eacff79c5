//! Empirical mean-square bound as the success probability varies, starting
//! from the origin. A reduced grid; the full one is `configs/msb-sweep.toml`.

use erasure_smpc::simulator::{run_paths_with, Controller, SimConfig};
use erasure_smpc::{ChannelModel, NoiseModel, Protocol};
use nalgebra::DVector;

fn main() -> erasure_smpc::Result<()> {
    let mut base = SimConfig::example(Protocol::Tp1);
    base.x0 = DVector::zeros(3);
    base.paths = 40;
    base.steps = 60;
    base.noise = NoiseModel::isotropic(3, 1.0)?;
    let moments = base.estimate_noise_moments(None)?;
    println!("{:>5} {:>10} {:>10} {:>10}", "p", "tp1", "tp2", "tp3");
    for p in [0.2, 0.4, 0.6, 0.8, 1.0] {
        let mut row = Vec::new();
        for protocol in Protocol::ALL {
            let cfg = SimConfig { protocol, channel: ChannelModel::iid(p)?, ..base.clone() };
            let (_, m) = run_paths_with(&Controller::design(&cfg, &moments)?, &cfg)?;
            row.push(m.empirical_msb);
        }
        println!("{p:>5.1} {:>10.2} {:>10.2} {:>10.2}", row[0], row[1], row[2]);
    }
    Ok(())
}
