//! Stacked-horizon description `x_{t:N+1} = 𝒜 x_t + ℬ u^a_{t:N} + 𝒟 w_{t:N}`
//! and the block-diagonal cost weights.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SmpcError};
use crate::linalg;
use crate::model::LinearSystem;

#[derive(Debug, Clone, PartialEq)]
pub struct LiftedDynamics {
    /// `(N+1)d × d`, blocks `I, A, …, A^N`.
    pub cal_a: DMatrix<f64>,
    /// `(N+1)d × Nm`, block `(i, j)` is `A^{i−1−j} B` for `j < i`.
    pub cal_b: DMatrix<f64>,
    /// `(N+1)d × Nd`, block `(i, j)` is `A^{i−1−j}` for `j < i`.
    pub cal_d: DMatrix<f64>,
    pub horizon: usize,
}

pub fn build_state_lift(sys: &LinearSystem, horizon: usize) -> Result<LiftedDynamics> {
    if horizon == 0 {
        return Err(SmpcError::param("horizon", "must be at least 1"));
    }
    let d = sys.state_dim();
    let m = sys.input_dim();
    let n = horizon;

    let mut powers = Vec::with_capacity(n + 1);
    powers.push(DMatrix::<f64>::identity(d, d));
    for k in 1..=n {
        let next = sys.a() * &powers[k - 1];
        powers.push(next);
    }

    let mut cal_a = DMatrix::zeros((n + 1) * d, d);
    let mut cal_b = DMatrix::zeros((n + 1) * d, n * m);
    let mut cal_d = DMatrix::zeros((n + 1) * d, n * d);
    for i in 0..=n {
        cal_a.view_mut((i * d, 0), (d, d)).copy_from(&powers[i]);
        for j in 0..i {
            let p = &powers[i - 1 - j];
            cal_b.view_mut((i * d, j * m), (d, m)).copy_from(&(p * sys.b()));
            cal_d.view_mut((i * d, j * d), (d, d)).copy_from(p);
        }
    }
    Ok(LiftedDynamics {
        cal_a,
        cal_b,
        cal_d,
        horizon,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostBlocks {
    pub q: DMatrix<f64>,
    pub q_f: DMatrix<f64>,
    pub r: DMatrix<f64>,
    /// `blkdiag(Q, …, Q, Q_f)` with `N` copies of `Q`.
    pub cal_q: DMatrix<f64>,
    /// `blkdiag(R, …, R)` with `N` copies.
    pub cal_r: DMatrix<f64>,
}

fn check_weight(name: &'static str, m: &DMatrix<f64>, min_eig: f64) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(SmpcError::dim(name, format!("{0}x{0}", m.nrows()), format!("{}x{}", m.nrows(), m.ncols())));
    }
    let scale = linalg::max_abs(m).max(1.0);
    if linalg::asymmetry(m) > 1e-12 * scale {
        return Err(SmpcError::param(name, "not symmetric"));
    }
    let lo = linalg::min_symmetric_eigenvalue(m);
    if lo < min_eig {
        return Err(SmpcError::param(name, format!("minimum eigenvalue {lo:e} below {min_eig:e}")));
    }
    Ok(())
}

pub fn build_cost_blocks(q: &DMatrix<f64>, q_f: &DMatrix<f64>, r: &DMatrix<f64>, horizon: usize) -> Result<CostBlocks> {
    if horizon == 0 {
        return Err(SmpcError::param("horizon", "must be at least 1"));
    }
    check_weight("Q", q, -1e-12)?;
    check_weight("Q_f", q_f, -1e-12)?;
    check_weight("R", r, 1e-12)?;
    if q_f.nrows() != q.nrows() {
        return Err(SmpcError::dim("Q_f vs Q", q.nrows(), q_f.nrows()));
    }
    let mut qs: Vec<&DMatrix<f64>> = vec![q; horizon];
    qs.push(q_f);
    let rs: Vec<&DMatrix<f64>> = vec![r; horizon];
    Ok(CostBlocks {
        q: q.clone(),
        q_f: q_f.clone(),
        r: r.clone(),
        cal_q: linalg::block_diag(&qs),
        cal_r: linalg::block_diag(&rs),
    })
}

/// `trace(𝒟ᵀ 𝒬 𝒟 Σ_W)`, the state-independent part of the objective constant.
pub fn noise_trace_term(lifted: &LiftedDynamics, costs: &CostBlocks, sigma_w: &DMatrix<f64>) -> f64 {
    let g = lifted.cal_d.transpose() * &costs.cal_q * &lifted.cal_d;
    (g * sigma_w).trace()
}

/// `c_t = x_tᵀ 𝒜ᵀ 𝒬 𝒜 x_t + trace(𝒟ᵀ 𝒬 𝒟 Σ_W)`.
pub fn constant_term(lifted: &LiftedDynamics, costs: &CostBlocks, x_t: &DVector<f64>, sigma_w: &DMatrix<f64>) -> f64 {
    let ax = &lifted.cal_a * x_t;
    let state = ax.dot(&(&costs.cal_q * &ax));
    state + noise_trace_term(lifted, costs, sigma_w)
}
