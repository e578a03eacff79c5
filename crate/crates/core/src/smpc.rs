//! The policy optimisation problem solved at each recalculation instant.
//!
//! The policy is `u_{t:N} = η + Θ e(w_{t:N−1})` with `Θ` strictly lower block
//! triangular. Its free entries, together with one auxiliary bound variable
//! per entry of `η` and of the free part of `Θ`, form the QP variable
//!
//! ```text
//! z = [ η (Nm) | θ (free Θ entries) | a_η (Nm) | a_θ (free Θ entries) ]
//! ```
//!
//! so that the row-wise input bound `|η_i| + φ_max ‖Θ_i‖₁ ≤ U_max` becomes a
//! set of linear inequalities. Structural zeros of `Θ` never appear in `z`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::channel::ProtocolMoments;
use crate::error::{Result, SmpcError};
use crate::lifting::{self, CostBlocks, LiftedDynamics};
use crate::linalg;
use crate::model::{LinearSystem, ReachabilityData};
use crate::moments::NoiseMoments;
use crate::qp::{QuadraticProgram, Solution, WarmStart};

/// Offset and gain of one recalculation instant.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    /// `Nm`.
    pub eta: DVector<f64>,
    /// `Nm × (N−1)d`.
    pub theta: DMatrix<f64>,
}

impl PolicyParams {
    pub fn zeros(horizon: usize, m: usize, d: usize) -> Self {
        Self {
            eta: DVector::zeros(horizon * m),
            theta: DMatrix::zeros(horizon * m, horizon.saturating_sub(1) * d),
        }
    }

    /// `|η_i| + φ_max ‖Θ_i‖₁` for every row.
    pub fn row_bounds(&self, phi_max: f64) -> Vec<f64> {
        (0..self.eta.len())
            .map(|i| self.eta[i].abs() + phi_max * self.theta.row(i).iter().map(|v| v.abs()).sum::<f64>())
            .collect()
    }

    /// Scales every row whose worst-case magnitude exceeds `u_max` back
    /// inside the bound. Returns the number of rows touched.
    pub fn restore_bounds(&mut self, phi_max: f64, u_max: f64) -> usize {
        let target = u_max * (1.0 - 1e-12);
        let mut touched = 0;
        for (i, s) in self.row_bounds(phi_max).into_iter().enumerate() {
            if s > target {
                let f = target / s;
                self.eta[i] *= f;
                self.theta.row_mut(i).scale_mut(f);
                touched += 1;
            }
        }
        touched
    }

    /// Nominal stacked control for a saturated noise vector `e`.
    pub fn control(&self, e: &DVector<f64>) -> DVector<f64> {
        &self.eta + &self.theta * e
    }
}

/// Which `m × d` blocks of `Θ` may be nonzero. Block `(ℓ, j)` multiplies
/// `e(w_{t+j})` in the control for step `t+ℓ`; only `j < ℓ` is ever allowed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GainMask {
    horizon: usize,
    allowed: Vec<bool>,
}

impl GainMask {
    /// Every strictly lower-triangular block free.
    pub fn strictly_lower(horizon: usize) -> Self {
        let cols = horizon.saturating_sub(1);
        let allowed = (0..horizon * cols).map(|k| k % cols.max(1) < k / cols.max(1)).collect();
        Self { horizon, allowed }
    }

    /// `Θ = 0`: an open-loop offset policy.
    pub fn offset_only(horizon: usize) -> Self {
        Self {
            horizon,
            allowed: vec![false; horizon * horizon.saturating_sub(1)],
        }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn allows(&self, row_block: usize, col_block: usize) -> bool {
        let cols = self.horizon.saturating_sub(1);
        row_block < self.horizon && col_block < cols && self.allowed[row_block * cols + col_block]
    }

    /// Forces block `(row_block, col_block)` to zero.
    pub fn zero_block(mut self, row_block: usize, col_block: usize) -> Self {
        let cols = self.horizon.saturating_sub(1);
        if row_block < self.horizon && col_block < cols {
            self.allowed[row_block * cols + col_block] = false;
        }
        self
    }

    /// Keeps only blocks that feed back the `lag` most recent noises.
    pub fn with_max_lag(mut self, lag: usize) -> Self {
        let cols = self.horizon.saturating_sub(1);
        for l in 0..self.horizon {
            for j in 0..cols {
                if j < l && l - j > lag {
                    self.allowed[l * cols + j] = false;
                }
            }
        }
        self
    }
}

/// Map between the QP variable `z` and `(η, Θ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionLayout {
    pub horizon: usize,
    pub m: usize,
    pub d: usize,
    /// `(row, col)` of each free `Θ` entry, row-major.
    pub theta_entries: Vec<(usize, usize)>,
    /// Indices into `theta_entries` grouped by row of `Θ`.
    row_entries: Vec<Vec<usize>>,
}

impl DecisionLayout {
    pub fn new(horizon: usize, m: usize, d: usize, mask: &GainMask) -> Result<Self> {
        if mask.horizon() != horizon {
            return Err(SmpcError::dim("gain mask horizon", horizon, mask.horizon()));
        }
        let mut theta_entries = Vec::new();
        let mut row_entries = vec![Vec::new(); horizon * m];
        for l in 0..horizon {
            for a in 0..m {
                let row = l * m + a;
                for j in 0..l {
                    if !mask.allows(l, j) {
                        continue;
                    }
                    for c in 0..d {
                        row_entries[row].push(theta_entries.len());
                        theta_entries.push((row, j * d + c));
                    }
                }
            }
        }
        Ok(Self {
            horizon,
            m,
            d,
            theta_entries,
            row_entries,
        })
    }

    pub fn n_eta(&self) -> usize {
        self.horizon * self.m
    }

    pub fn n_theta(&self) -> usize {
        self.theta_entries.len()
    }

    /// Number of policy coordinates (without auxiliaries).
    pub fn n_policy(&self) -> usize {
        self.n_eta() + self.n_theta()
    }

    pub fn n_total(&self) -> usize {
        2 * self.n_policy()
    }

    pub fn theta_offset(&self) -> usize {
        self.n_eta()
    }

    pub fn aux_eta_offset(&self) -> usize {
        self.n_policy()
    }

    pub fn aux_theta_offset(&self) -> usize {
        self.n_policy() + self.n_eta()
    }

    pub fn unpack(&self, z: &DVector<f64>) -> PolicyParams {
        let mut p = PolicyParams::zeros(self.horizon, self.m, self.d);
        p.eta.copy_from(&z.rows(0, self.n_eta()));
        for (k, &(r, c)) in self.theta_entries.iter().enumerate() {
            p.theta[(r, c)] = z[self.theta_offset() + k];
        }
        p
    }

    /// Inverse of [`unpack`](Self::unpack) with the tightest auxiliaries.
    /// Entries of `Θ` outside the layout are ignored.
    pub fn pack(&self, policy: &PolicyParams) -> DVector<f64> {
        let mut z = DVector::zeros(self.n_total());
        for i in 0..self.n_eta() {
            z[i] = policy.eta[i];
            z[self.aux_eta_offset() + i] = policy.eta[i].abs();
        }
        for (k, &(r, c)) in self.theta_entries.iter().enumerate() {
            z[self.theta_offset() + k] = policy.theta[(r, c)];
            z[self.aux_theta_offset() + k] = policy.theta[(r, c)].abs();
        }
        z
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RotationMode {
    /// Condition and drift expressed in the rotated coordinates
    /// `y = (A_oᵀ)^t x_o` of the subsampled orthogonal subsystem.
    #[default]
    ProofConsistent,
    /// Condition on `x_o` itself with the time-invariant drift row.
    LiteralPaper,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityConfig {
    pub r: f64,
    pub epsilon: f64,
    pub zeta: f64,
    pub rotation_mode: RotationMode,
}

impl StabilityConfig {
    /// Checks `r, ε > 0` and `0 < ζ < U_max / (√d_o σ₁(R_κ⁺))`.
    pub fn new(r: f64, epsilon: f64, zeta: f64, rotation_mode: RotationMode, sys: &LinearSystem, reach: &ReachabilityData) -> Result<Self> {
        if !(r > 0.0 && r.is_finite()) {
            return Err(SmpcError::param("stability.r", format!("must be positive, got {r}")));
        }
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(SmpcError::param("stability.epsilon", format!("must be positive, got {epsilon}")));
        }
        let limit = reach.zeta_upper_limit(sys);
        if !(zeta > 0.0 && zeta < limit) {
            return Err(SmpcError::param("stability.zeta", format!("{zeta} outside the open interval ]0, {limit}[")));
        }
        Ok(Self {
            r,
            epsilon,
            zeta,
            rotation_mode,
        })
    }

    /// `ζ = 0.99 ×` its upper limit.
    pub fn with_default_zeta(r: f64, epsilon: f64, rotation_mode: RotationMode, sys: &LinearSystem, reach: &ReachabilityData) -> Result<Self> {
        let limit = reach.zeta_upper_limit(sys);
        let zeta = if limit.is_finite() { 0.99 * limit } else { r };
        Self::new(r, epsilon, zeta, rotation_mode, sys, reach)
    }
}

/// Component-wise `sat^∞_{r,ζ}`.
pub fn sat_inf(z: &DVector<f64>, r: f64, zeta: f64) -> DVector<f64> {
    z.map(|v| {
        if v > r {
            zeta
        } else if v < -r {
            -zeta
        } else {
            v * zeta / r
        }
    })
}

/// One half-space `coeffsᵀ η_{0:κm} ≤ rhs`.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilityRow {
    pub coeffs: DVector<f64>,
    pub rhs: f64,
    /// Orthogonal coordinate that triggered the row.
    pub component: usize,
}

/// Rotation `T` applied to `x_o` and the exponent used for the fallback.
fn rotation(sys: &LinearSystem, t_abs: usize, mode: RotationMode) -> DMatrix<f64> {
    let a_ot = sys.a_o().transpose();
    match mode {
        RotationMode::ProofConsistent => linalg::matrix_power(&a_ot, t_abs),
        RotationMode::LiteralPaper => DMatrix::identity(a_ot.nrows(), a_ot.nrows()),
    }
}

/// Monitored coordinates `T x_o`.
pub fn monitored_coordinates(x: &DVector<f64>, t_abs: usize, sys: &LinearSystem, mode: RotationMode) -> DVector<f64> {
    let d_o = sys.orthogonal_dim();
    rotation(sys, t_abs, mode) * x.rows(0, d_o)
}

pub fn build_stability_constraints(x: &DVector<f64>, t_abs: usize, sys: &LinearSystem, reach: &ReachabilityData, cfg: &StabilityConfig) -> Vec<StabilityRow> {
    let d_o = sys.orthogonal_dim();
    if d_o == 0 {
        return Vec::new();
    }
    let t = rotation(sys, t_abs, cfg.rotation_mode);
    let y = &t * x.rows(0, d_o);
    let h = t * linalg::matrix_power(&sys.a_o().transpose(), reach.kappa) * &reach.r_kappa;
    let threshold = cfg.r + cfg.epsilon;
    let mut rows = Vec::new();
    for j in 0..d_o {
        let hj = h.row(j).transpose();
        if y[j] >= threshold {
            rows.push(StabilityRow {
                coeffs: hj,
                rhs: -cfg.zeta,
                component: j,
            });
        } else if y[j] <= -threshold {
            rows.push(StabilityRow {
                coeffs: -hj,
                rhs: -cfg.zeta,
                component: j,
            });
        }
    }
    rows
}

/// Always-feasible policy with `Θ = 0` whose first `κ` offsets realise the
/// saturated drift exactly.
pub fn fallback_policy(x: &DVector<f64>, t_abs: usize, sys: &LinearSystem, reach: &ReachabilityData, cfg: &StabilityConfig, horizon: usize) -> PolicyParams {
    let d = sys.state_dim();
    let m = sys.input_dim();
    let d_o = sys.orthogonal_dim();
    let mut policy = PolicyParams::zeros(horizon, m, d);
    if d_o == 0 {
        return policy;
    }
    let kappa = reach.kappa;
    let a_o = sys.a_o();
    let (y, power) = match cfg.rotation_mode {
        RotationMode::ProofConsistent => (monitored_coordinates(x, t_abs, sys, cfg.rotation_mode), t_abs + kappa),
        RotationMode::LiteralPaper => (x.rows(0, d_o).into_owned(), kappa),
    };
    let head = -&reach.r_kappa_pinv * linalg::matrix_power(&a_o, power) * sat_inf(&y, cfg.r, cfg.zeta);
    policy.eta.rows_mut(0, kappa * m).copy_from(&head);
    policy
}

/// Input-bound rows over the full `z`, ordered as: `±η_i − a_η,i ≤ 0`
/// (two per entry), `±θ_k − a_θ,k ≤ 0`, then one budget row per input row.
pub fn build_input_constraints(layout: &DecisionLayout, phi_max: f64, u_max: f64) -> (DMatrix<f64>, DVector<f64>) {
    let n = layout.n_total();
    let np = layout.n_policy();
    let rows = 2 * np + layout.n_eta();
    let mut a = DMatrix::zeros(rows, n);
    let mut b = DVector::zeros(rows);
    for k in 0..np {
        a[(2 * k, k)] = 1.0;
        a[(2 * k, np + k)] = -1.0;
        a[(2 * k + 1, k)] = -1.0;
        a[(2 * k + 1, np + k)] = -1.0;
    }
    for i in 0..layout.n_eta() {
        let r = 2 * np + i;
        a[(r, layout.aux_eta_offset() + i)] = 1.0;
        for &k in &layout.row_entries[i] {
            a[(r, layout.aux_theta_offset() + k)] = phi_max;
        }
        b[r] = u_max;
    }
    (a, b)
}

/// State-independent part of the objective; only the `η` gradient and the
/// constant move with the measured state.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveTemplate {
    pub layout: DecisionLayout,
    /// Hessian over the full `z` (zero on auxiliaries).
    pub p: DMatrix<f64>,
    /// Gradient on the `θ` coordinates.
    pub q_theta: DVector<f64>,
    /// `q_η = L x` with `L = 2 μ_Xᵀ ℬᵀ 𝒬 𝒜`.
    pub eta_gain: DMatrix<f64>,
    /// `𝒜ᵀ 𝒬 𝒜`.
    pub state_weight: DMatrix<f64>,
    /// `trace(𝒟ᵀ 𝒬 𝒟 Σ_W)`.
    pub noise_constant: f64,
}

pub fn build_objective_template(
    layout: &DecisionLayout,
    lifted: &LiftedDynamics,
    costs: &CostBlocks,
    protocol_moments: &ProtocolMoments,
    noise_moments: &NoiseMoments,
) -> Result<ObjectiveTemplate> {
    let nm = layout.n_eta();
    let ne = layout.horizon.saturating_sub(1) * layout.d;
    if protocol_moments.sigma.shape() != (nm, nm) {
        return Err(SmpcError::dim("protocol moments", format!("{nm}x{nm}"), format!("{}x{}", protocol_moments.sigma.nrows(), protocol_moments.sigma.ncols())));
    }
    if noise_moments.sigma_e.shape() != (ne, ne) {
        return Err(SmpcError::dim("noise moments", format!("{ne}x{ne}"), format!("{}x{}", noise_moments.sigma_e.nrows(), noise_moments.sigma_e.ncols())));
    }
    if lifted.cal_b.ncols() != nm {
        return Err(SmpcError::dim("lifted input matrix columns", nm, lifted.cal_b.ncols()));
    }

    let n = layout.n_total();
    let mut p = DMatrix::zeros(n, n);
    p.view_mut((0, 0), (nm, nm)).copy_from(&(&protocol_moments.sigma * 2.0));
    let off = layout.theta_offset();
    for (a, &(i, j)) in layout.theta_entries.iter().enumerate() {
        for (b, &(k, l)) in layout.theta_entries.iter().enumerate() {
            p[(off + a, off + b)] = 2.0 * protocol_moments.sigma_s[(i, k)] * noise_moments.sigma_e[(l, j)];
        }
    }
    let p = linalg::symmetrize(&p);
    let scale = linalg::max_abs(&p).max(1.0);
    let lo = linalg::min_symmetric_eigenvalue(&p);
    if lo < -1e-8 * scale {
        return Err(SmpcError::NotPositiveSemidefinite { min_eigenvalue: lo });
    }

    let bq = lifted.cal_b.transpose() * &costs.cal_q;
    let cross = protocol_moments.mu_s.transpose() * &bq * &lifted.cal_d * &noise_moments.sigma_e_prime;
    let q_theta = DVector::from_iterator(layout.n_theta(), layout.theta_entries.iter().map(|&(i, j)| 2.0 * cross[(i, j)]));
    let eta_gain = protocol_moments.mu.transpose() * &bq * &lifted.cal_a * 2.0;
    let state_weight = lifted.cal_a.transpose() * &costs.cal_q * &lifted.cal_a;
    let noise_constant = lifting::noise_trace_term(lifted, costs, &noise_moments.sigma_w);
    Ok(ObjectiveTemplate {
        layout: layout.clone(),
        p,
        q_theta,
        eta_gain,
        state_weight,
        noise_constant,
    })
}

impl ObjectiveTemplate {
    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut q = DVector::zeros(self.layout.n_total());
        q.rows_mut(0, self.layout.n_eta()).copy_from(&(&self.eta_gain * x));
        q.rows_mut(self.layout.theta_offset(), self.layout.n_theta()).copy_from(&self.q_theta);
        q
    }

    pub fn constant(&self, x: &DVector<f64>) -> f64 {
        x.dot(&(&self.state_weight * x)) + self.noise_constant
    }

    /// Expected finite-horizon cost of `policy` from state `x`.
    pub fn value(&self, x: &DVector<f64>, policy: &PolicyParams) -> f64 {
        let z = self.layout.pack(policy);
        0.5 * z.dot(&(&self.p * &z)) + self.gradient(x).dot(&z) + self.constant(x)
    }
}

/// `(P, q, c)` of the objective `½ zᵀPz + qᵀz + c` at state `x`.
pub fn build_objective(
    x: &DVector<f64>,
    layout: &DecisionLayout,
    lifted: &LiftedDynamics,
    costs: &CostBlocks,
    protocol_moments: &ProtocolMoments,
    noise_moments: &NoiseMoments,
) -> Result<(DMatrix<f64>, DVector<f64>, f64)> {
    let t = build_objective_template(layout, lifted, costs, protocol_moments, noise_moments)?;
    let q = t.gradient(x);
    let c = t.constant(x);
    Ok((t.p, q, c))
}

/// The QP of one recalculation instant plus what is needed to read it back.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyQp {
    pub qp: QuadraticProgram,
    pub constant: f64,
    pub layout: DecisionLayout,
    /// Number of leading input-bound rows; stability rows follow.
    pub input_rows: usize,
    pub stability: Vec<StabilityRow>,
}

impl PolicyQp {
    pub fn policy(&self, z: &DVector<f64>) -> PolicyParams {
        self.layout.unpack(z)
    }

    /// Objective value including the constant.
    pub fn cost(&self, z: &DVector<f64>) -> f64 {
        self.qp.objective(z) + self.constant
    }

    /// Warm start from the solution of an earlier instant. Input-bound
    /// multipliers carry over; a stability multiplier carries over only if
    /// the same coordinate is constrained in the same direction.
    pub fn warm_start_from(&self, prev_qp: &PolicyQp, prev: &Solution) -> WarmStart {
        let mut y = DVector::zeros(self.qp.num_constraints());
        if prev.y.len() == prev_qp.qp.num_constraints() && prev_qp.input_rows == self.input_rows {
            y.rows_mut(0, self.input_rows).copy_from(&prev.y.rows(0, self.input_rows));
            for (k, row) in self.stability.iter().enumerate() {
                let hit = prev_qp.stability.iter().position(|r| r.component == row.component && (r.coeffs.dot(&row.coeffs) > 0.0));
                if let Some(j) = hit {
                    y[self.input_rows + k] = prev.y[prev_qp.input_rows + j];
                }
            }
        }
        WarmStart { z: prev.z.clone(), y, rho: Some(prev.rho) }
    }
}

pub fn assemble_qp(template: &ObjectiveTemplate, x: &DVector<f64>, input: &(DMatrix<f64>, DVector<f64>), stability: Vec<StabilityRow>) -> Result<PolicyQp> {
    let layout = &template.layout;
    let n = layout.n_total();
    let (a_in, b_in) = input;
    if a_in.ncols() != n {
        return Err(SmpcError::dim("input constraint columns", n, a_in.ncols()));
    }
    let rows = a_in.nrows() + stability.len();
    let mut a = DMatrix::zeros(rows, n);
    let mut b = DVector::zeros(rows);
    a.view_mut((0, 0), (a_in.nrows(), n)).copy_from(a_in);
    b.rows_mut(0, a_in.nrows()).copy_from(b_in);
    for (k, row) in stability.iter().enumerate() {
        let r = a_in.nrows() + k;
        if row.coeffs.len() > layout.n_eta() {
            return Err(SmpcError::dim("stability row", format!("<= {}", layout.n_eta()), row.coeffs.len()));
        }
        for (j, c) in row.coeffs.iter().enumerate() {
            a[(r, j)] = *c;
        }
        b[r] = row.rhs;
    }
    let qp = QuadraticProgram::new(template.p.clone(), template.gradient(x), a, b)?;
    Ok(PolicyQp {
        qp,
        constant: template.constant(x),
        layout: layout.clone(),
        input_rows: a_in.nrows(),
        stability,
    })
}

/// Everything fixed across recalculation instants of one controller.
#[derive(Debug, Clone)]
pub struct PolicyProblem {
    pub sys: LinearSystem,
    pub reach: ReachabilityData,
    pub stability: StabilityConfig,
    pub template: ObjectiveTemplate,
    pub input: (DMatrix<f64>, DVector<f64>),
    pub phi_max: f64,
}

impl PolicyProblem {
    pub fn new(sys: LinearSystem, reach: ReachabilityData, stability: StabilityConfig, template: ObjectiveTemplate, phi_max: f64) -> Result<Self> {
        if !(phi_max > 0.0) {
            return Err(SmpcError::param("phi_max", "must be positive"));
        }
        if reach.kappa > template.layout.horizon {
            return Err(SmpcError::param("kappa", format!("reachability index {} exceeds horizon {}", reach.kappa, template.layout.horizon)));
        }
        let input = build_input_constraints(&template.layout, phi_max, sys.u_max());
        Ok(Self {
            sys,
            reach,
            stability,
            template,
            input,
            phi_max,
        })
    }

    pub fn horizon(&self) -> usize {
        self.template.layout.horizon
    }

    pub fn kappa(&self) -> usize {
        self.reach.kappa
    }

    pub fn layout(&self) -> &DecisionLayout {
        &self.template.layout
    }

    pub fn assemble(&self, x: &DVector<f64>, t_abs: usize) -> Result<PolicyQp> {
        let rows = build_stability_constraints(x, t_abs, &self.sys, &self.reach, &self.stability);
        assemble_qp(&self.template, x, &self.input, rows)
    }

    pub fn fallback(&self, x: &DVector<f64>, t_abs: usize) -> PolicyParams {
        fallback_policy(x, t_abs, &self.sys, &self.reach, &self.stability, self.horizon())
    }
}
