//! Decompose the example plant, find its reachability index and the largest
//! admissible drift amount.

use erasure_smpc::model::{verify_decomposition, ReachabilityData};
use erasure_smpc::LinearSystem;

fn main() -> erasure_smpc::Result<()> {
    let sys = LinearSystem::three_state_example();
    let report = verify_decomposition(&sys);
    println!("decomposition check: {}", if report.passed() { "ok" } else { "failed" });
    println!("orthogonal part d_o = {}, Schur-stable part d_s = {}", sys.orthogonal_dim(), sys.schur_dim());

    let reach = ReachabilityData::new(&sys)?;
    println!("reachability index kappa = {}", reach.kappa);
    println!("R_kappa =\n{:.4}", reach.r_kappa);
    println!("sigma_1(R_kappa^+) = {:.5}", reach.pinv_norm());
    println!("zeta must lie below {:.5}", reach.zeta_upper_limit(&sys));
    Ok(())
}
