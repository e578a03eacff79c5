//! Exact selection moments of the three protocols against a Monte Carlo
//! estimate.

use erasure_smpc::channel::{exact_protocol_moments, mc_protocol_moments};
use erasure_smpc::{ChannelModel, Protocol};
use nalgebra::DMatrix;

fn main() -> erasure_smpc::Result<()> {
    let (n, m, kappa, p) = (4, 1, 3, 0.8);
    let g = DMatrix::from_fn(n * m, n * m, |i, j| ((i + 2 * j) % 5) as f64 / 5.0);
    let m_mat = &g * g.transpose() + DMatrix::identity(n * m, n * m);
    let channel = ChannelModel::iid(p)?;
    for protocol in Protocol::ALL {
        let exact = exact_protocol_moments(protocol, p, &m_mat, n, m, kappa)?;
        let mc = mc_protocol_moments(protocol, &channel, &m_mat, n, m, kappa, 200_000, 3)?;
        println!(
            "{}: diag E[X] = {:.3?}   max |exact - sampled|: mu {:.1e}, sigma {:.1e}",
            protocol.name(),
            exact.mu.diagonal().as_slice(),
            (&exact.mu - &mc.mu).amax(),
            (&exact.sigma - &mc.sigma).amax()
        );
    }
    Ok(())
}
