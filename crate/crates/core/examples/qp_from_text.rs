//! Solve a QP stored in the plain-text format.
//!
//! ```text
//! cargo run --example qp_from_text -- problem.qp
//! ```
//!
//! Without an argument a small built-in problem is used.

use erasure_smpc::qp::{check_kkt, solve};
use erasure_smpc::{QuadraticProgram, SolverSettings};

const BUILTIN: &str = "\
# minimise (z1 - 1)^2 + (z2 - 2)^2 subject to z1 + z2 <= 1, z >= 0
qp 2 3
2 0
0 2
-2 -4
1 1
-1 0
0 -1
1 0 0
";

fn main() -> erasure_smpc::Result<()> {
    let qp = match std::env::args().nth(1) {
        Some(path) => QuadraticProgram::read_text(path.as_ref())?,
        None => QuadraticProgram::from_text(BUILTIN)?,
    };
    let sol = solve(&qp, &SolverSettings::default(), None);
    let kkt = check_kkt(&qp, &sol.z, &sol.y);
    println!("status {} after {} iterations (polished: {})", sol.status, sol.iterations, sol.polished);
    println!("z = {:.6?}", sol.z.as_slice());
    println!("multipliers = {:.6?}", sol.y.as_slice());
    println!("objective {:.8}, KKT residual {:.1e}", sol.objective, kkt.max());
    Ok(())
}
