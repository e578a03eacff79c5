//! Dense convex QP solver based on operator splitting.
//!
//! Solves `min ½ zᵀPz + qᵀz  s.t.  Az ≤ b` with the ADMM iteration used by
//! OSQP: a regularised linear solve with the factorised matrix
//! `P + σI + ρAᵀA`, a projection of the constraint slack onto `(−∞, b]`, and
//! a dual update. The step parameter ρ adapts to the residual balance. Once
//! the iterates are close, the active set is guessed from the multipliers and
//! an equality-constrained KKT system is solved ("polishing") to reach the
//! tolerance in far fewer iterations.

use std::fmt;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Result, SmpcError};
use crate::linalg;

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticProgram {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl QuadraticProgram {
    pub fn new(p: DMatrix<f64>, q: DVector<f64>, a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        let n = q.len();
        if p.shape() != (n, n) {
            return Err(SmpcError::dim("QP P", format!("{n}x{n}"), format!("{}x{}", p.nrows(), p.ncols())));
        }
        if a.ncols() != n && a.nrows() > 0 {
            return Err(SmpcError::dim("QP A columns", n, a.ncols()));
        }
        if a.nrows() != b.len() {
            return Err(SmpcError::dim("QP A rows vs b", b.len(), a.nrows()));
        }
        let a = if a.nrows() == 0 { DMatrix::zeros(0, n) } else { a };
        if linalg::asymmetry(&p) > 1e-12 * linalg::max_abs(&p).max(1.0) {
            return Err(SmpcError::param("P", "not symmetric"));
        }
        Ok(Self { p, q, a, b })
    }

    pub fn num_variables(&self) -> usize {
        self.q.len()
    }

    pub fn num_constraints(&self) -> usize {
        self.b.len()
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.p * z)) + self.q.dot(z)
    }

    /// Largest constraint violation `‖(Az − b)₊‖_∞`.
    pub fn max_violation(&self, z: &DVector<f64>) -> f64 {
        (&self.a * z - &self.b).iter().fold(0.0_f64, |acc, v| acc.max(*v))
    }

    /// Plain-text dense format: a header line `qp <n> <m>`, then `n` rows of
    /// `P`, one line with `q`, `m` rows of `A` and one line with `b`. Numbers
    /// carry 17 significant digits.
    pub fn to_text(&self) -> String {
        let n = self.num_variables();
        let m = self.num_constraints();
        let mut s = format!("qp {n} {m}\n");
        let line = |vals: &mut dyn Iterator<Item = f64>| -> String {
            let v: Vec<String> = vals.map(|x| format!("{x:.16e}")).collect();
            v.join(" ") + "\n"
        };
        for i in 0..n {
            s += &line(&mut self.p.row(i).iter().copied());
        }
        s += &line(&mut self.q.iter().copied());
        for i in 0..m {
            s += &line(&mut self.a.row(i).iter().copied());
        }
        s += &line(&mut self.b.iter().copied());
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |reason: String| SmpcError::Format {
            what: "QP text",
            reason,
        };
        let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'));
        let header = lines.next().ok_or_else(|| bad("empty input".into()))?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 3 || parts[0] != "qp" {
            return Err(bad(format!("expected header `qp <n> <m>`, got `{header}`")));
        }
        let n: usize = parts[1].parse().map_err(|_| bad(format!("bad variable count `{}`", parts[1])))?;
        let m: usize = parts[2].parse().map_err(|_| bad(format!("bad constraint count `{}`", parts[2])))?;
        let mut nums = Vec::with_capacity(n * n + n + m * n + m);
        for l in lines {
            for tok in l.split_whitespace() {
                nums.push(tok.parse::<f64>().map_err(|_| bad(format!("not a number: `{tok}`")))?);
            }
        }
        let expected = n * n + n + m * n + m;
        if nums.len() != expected {
            return Err(bad(format!("expected {expected} numbers, found {}", nums.len())));
        }
        let mut it = nums.into_iter();
        let mut take = |k: usize| -> Vec<f64> { it.by_ref().take(k).collect() };
        let p = DMatrix::from_row_slice(n, n, &take(n * n));
        let q = DVector::from_vec(take(n));
        let a = DMatrix::from_row_slice(m, n, &take(m * n));
        let b = DVector::from_vec(take(m));
        Self::new(p, q, a, b)
    }

    pub fn write_text(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read_text(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverSettings {
    pub max_iterations: usize,
    /// Absolute tolerance on both the primal and the dual residual.
    pub tolerance: f64,
    /// Initial step parameter ρ.
    pub rho: f64,
    pub sigma: f64,
    /// Over-relaxation factor in ]0, 2[.
    pub alpha: f64,
    pub adaptive_rho: bool,
    pub adaptive_rho_interval: usize,
    pub polish: bool,
    /// Residual level below which polishing is attempted before convergence.
    pub polish_trigger: f64,
    pub infeasibility_tolerance: f64,
    /// Record the splitting residual every 100 iterations.
    pub record_trace: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            max_iterations: 20_000,
            tolerance: 1e-7,
            rho: 1.0,
            sigma: 1e-6,
            alpha: 1.6,
            adaptive_rho: true,
            adaptive_rho_interval: 25,
            polish: true,
            polish_trigger: 1e-3,
            infeasibility_tolerance: 1e-6,
            record_trace: false,
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(SmpcError::param("solver.tolerance", "must be positive"));
        }
        if !(self.rho > 0.0 && self.sigma > 0.0) {
            return Err(SmpcError::param("solver.rho", "rho and sigma must be positive"));
        }
        if !(self.alpha > 0.0 && self.alpha < 2.0) {
            return Err(SmpcError::param("solver.alpha", "must lie in ]0, 2["));
        }
        if self.max_iterations == 0 {
            return Err(SmpcError::param("solver.max_iterations", "must be positive"));
        }
        Ok(())
    }
}

/// Primal point and multipliers from an earlier solve.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmStart {
    pub z: DVector<f64>,
    pub y: DVector<f64>,
    /// Step size the earlier solve finished with.
    pub rho: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    MaxIterations,
    /// A primal infeasibility certificate was found.
    Infeasible,
    /// A dual infeasibility (unboundedness) certificate was found.
    Unbounded,
}

impl fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::MaxIterations => "max_iterations",
            SolveStatus::Infeasible => "infeasible",
            SolveStatus::Unbounded => "unbounded",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeritSample {
    pub iteration: usize,
    /// Fixed-point residual of the splitting iteration in the ρ/σ metric.
    pub merit: f64,
    /// Incremented whenever ρ changes (the metric changes with it).
    pub rho_epoch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub z: DVector<f64>,
    /// Multipliers of `Az ≤ b`.
    pub y: DVector<f64>,
    pub objective: f64,
    pub status: SolveStatus,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub iterations: usize,
    pub polished: bool,
    /// Final value of the adaptive step size.
    pub rho: f64,
    pub trace: Vec<MeritSample>,
}

impl Solution {
    pub fn warm_start(&self) -> WarmStart {
        WarmStart {
            z: self.z.clone(),
            y: self.y.clone(),
            rho: Some(self.rho),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    /// `‖Pz + q + Aᵀλ‖_∞`.
    pub stationarity: f64,
    /// `‖(Az − b)₊‖_∞`.
    pub primal_infeasibility: f64,
    /// `|λᵀ(Az − b)|`.
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal_infeasibility).max(self.complementarity)
    }
}

pub fn check_kkt(qp: &QuadraticProgram, z: &DVector<f64>, lambda: &DVector<f64>) -> KktResiduals {
    let grad = &qp.p * z + &qp.q + qp.a.transpose() * lambda;
    let slack = &qp.a * z - &qp.b;
    KktResiduals {
        stationarity: linalg::inf_norm(&grad),
        primal_infeasibility: slack.iter().fold(0.0_f64, |acc, v| acc.max(*v)),
        complementarity: lambda.dot(&slack).abs(),
    }
}

/// Active-set rounds after the splitting iterations have settled.
const POLISH_ROUNDS: usize = 8;

/// Solves the equality-constrained problem on `active`. The primal
/// regularisation is centred at `center`, so directions the active
/// constraints leave undetermined keep their current values.
fn solve_active(qp: &QuadraticProgram, active: &[usize], center: &DVector<f64>) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = qp.num_variables();
    let k = active.len();
    let dim = n + k;
    let delta = 1e-7;

    let mut kkt = DMatrix::<f64>::zeros(dim, dim);
    kkt.view_mut((0, 0), (n, n)).copy_from(&qp.p);
    for (r, &i) in active.iter().enumerate() {
        for j in 0..n {
            kkt[(n + r, j)] = qp.a[(i, j)];
            kkt[(j, n + r)] = qp.a[(i, j)];
        }
    }
    let exact = kkt.clone();
    for i in 0..n {
        kkt[(i, i)] += delta;
    }
    for r in 0..k {
        kkt[(n + r, n + r)] -= delta;
    }
    let lu = kkt.lu();
    let mut rhs = DVector::zeros(dim);
    rhs.rows_mut(0, n).copy_from(&(-&qp.q));
    for (r, &i) in active.iter().enumerate() {
        rhs[n + r] = qp.b[i];
    }
    let mut first = rhs.clone();
    first.rows_mut(0, n).axpy(delta, center, 1.0);
    let mut sol = lu.solve(&first)?;
    for _ in 0..25 {
        let resid = &rhs - &exact * &sol;
        if linalg::inf_norm(&resid) < 1e-13 {
            break;
        }
        sol += lu.solve(&resid)?;
    }
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some((sol.rows(0, n).into_owned(), sol.rows(n, k).into_owned()))
}

/// Guesses the active set from the splitting iterates, then corrects it by
/// adding violated rows and dropping rows with negative multipliers. Returns
/// the polished point and multipliers if they meet the KKT conditions
/// within `tol`.
fn polish(qp: &QuadraticProgram, x: &DVector<f64>, z_slack: &DVector<f64>, y: &DVector<f64>, tol: f64) -> Option<(DVector<f64>, DVector<f64>)> {
    let m = qp.num_constraints();
    let mut is_active: Vec<bool> = (0..m).map(|i| y[i] > qp.b[i] - z_slack[i]).collect();
    let mut center = x.clone();
    for _ in 0..POLISH_ROUNDS {
        let active: Vec<usize> = (0..m).filter(|&i| is_active[i]).collect();
        let (xp, lam) = solve_active(qp, &active, &center)?;
        let mut y_full = DVector::zeros(m);
        let mut changed = false;
        for (r, &i) in active.iter().enumerate() {
            if lam[r] < -tol {
                is_active[i] = false;
                changed = true;
            } else {
                y_full[i] = lam[r].max(0.0);
            }
        }
        let slack = &qp.a * &xp - &qp.b;
        for i in 0..m {
            if !is_active[i] && slack[i] > tol {
                is_active[i] = true;
                changed = true;
            }
        }
        if !changed {
            let res = check_kkt(qp, &xp, &y_full);
            if res.stationarity <= tol && res.primal_infeasibility <= tol && res.complementarity <= tol {
                return Some((xp, y_full));
            }
            return None;
        }
        center = xp;
    }
    None
}

fn finish(qp: &QuadraticProgram, x: DVector<f64>, y: DVector<f64>, status: SolveStatus, iterations: usize, polished: bool, rho: f64, trace: Vec<MeritSample>) -> Solution {
    let res = check_kkt(qp, &x, &y);
    Solution {
        objective: qp.objective(&x),
        z: x,
        y,
        status,
        primal_residual: res.primal_infeasibility,
        dual_residual: res.stationarity,
        iterations,
        polished,
        rho,
        trace,
    }
}

/// Ruiz-equilibrated copy of a QP: `P̄ = c D P D`, `q̄ = c D q`,
/// `Ā = E A D`, `b̄ = E b`.
struct Scaled {
    qp: QuadraticProgram,
    /// `ĀᵀĀ`, reused by every refactorisation.
    ata: DMatrix<f64>,
    d: DVector<f64>,
    e: DVector<f64>,
    c: f64,
}

const SCALING_PASSES: usize = 15;
const MIN_SCALING: f64 = 1e-4;
const MAX_SCALING: f64 = 1e4;

fn clamp_norm(v: f64) -> f64 {
    if v < MIN_SCALING {
        1.0
    } else {
        v.min(MAX_SCALING)
    }
}

/// `out = A x` for column-major `A`.
fn mat_vec(a: &DMatrix<f64>, x: &[f64], out: &mut [f64]) {
    let m = a.nrows();
    out.fill(0.0);
    for (col, xj) in a.as_slice().chunks_exact(m.max(1)).zip(x) {
        for (o, v) in out.iter_mut().zip(col) {
            *o += v * xj;
        }
    }
}

/// `out += Aᵀ y`.
fn mat_tr_vec_add(a: &DMatrix<f64>, y: &[f64], out: &mut [f64]) {
    let m = a.nrows();
    if m == 0 {
        return;
    }
    for (col, o) in a.as_slice().chunks_exact(m).zip(out.iter_mut()) {
        *o += col.iter().zip(y).map(|(u, v)| u * v).sum::<f64>();
    }
}

fn gram(a: &DMatrix<f64>) -> DMatrix<f64> {
    let (m, n) = a.shape();
    let mut g = DMatrix::zeros(n, n);
    if m == 0 {
        return g;
    }
    let s = a.as_slice();
    for j in 0..n {
        let cj = &s[j * m..(j + 1) * m];
        for k in 0..=j {
            let ck = &s[k * m..(k + 1) * m];
            let v: f64 = cj.iter().zip(ck).map(|(u, w)| u * w).sum();
            g[(j, k)] = v;
            g[(k, j)] = v;
        }
    }
    g
}

fn equilibrate(qp: &QuadraticProgram) -> Scaled {
    let n = qp.num_variables();
    let m = qp.num_constraints();
    let mut p = qp.p.clone();
    let mut q = qp.q.clone();
    let mut a = qp.a.clone();
    let mut d = DVector::from_element(n, 1.0);
    let mut e = DVector::from_element(m, 1.0);
    let mut c = 1.0;
    let mut col = vec![0.0_f64; n];
    let mut row = vec![0.0_f64; m];
    for _ in 0..SCALING_PASSES {
        // Column norms of [P; A] and row norms of A, from the column-major data.
        {
            let ps = p.as_slice();
            let as_ = a.as_slice();
            row.iter_mut().for_each(|v| *v = 0.0);
            for j in 0..n {
                let mut cm = 0.0_f64;
                for v in &ps[j * n..(j + 1) * n] {
                    cm = cm.max(v.abs());
                }
                for (i, v) in as_[j * m..(j + 1) * m].iter().enumerate() {
                    let av = v.abs();
                    cm = cm.max(av);
                    row[i] = row[i].max(av);
                }
                col[j] = 1.0 / clamp_norm(cm).sqrt();
            }
            for r in row.iter_mut() {
                *r = 1.0 / clamp_norm(*r).sqrt();
            }
        }
        {
            let ps = p.as_mut_slice();
            let as_ = a.as_mut_slice();
            for j in 0..n {
                for i in 0..n {
                    ps[j * n + i] *= col[i] * col[j];
                }
                for i in 0..m {
                    as_[j * m + i] *= row[i] * col[j];
                }
                q[j] *= col[j];
                d[j] *= col[j];
            }
            for i in 0..m {
                e[i] *= row[i];
            }
        }
        let ps = p.as_slice();
        let mut mean_col = 0.0;
        for j in 0..n {
            mean_col += ps[j * n..(j + 1) * n].iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
        }
        if n > 0 {
            mean_col /= n as f64;
        }
        let gamma = 1.0 / clamp_norm(mean_col.max(q.amax()));
        p *= gamma;
        q *= gamma;
        c *= gamma;
    }
    let b = qp.b.component_mul(&e);
    let ata = gram(&a);
    Scaled {
        qp: QuadraticProgram { p, q, a, b },
        ata,
        d,
        e,
        c,
    }
}

fn factor(sc: &Scaled, sigma: f64, rho: f64) -> Cholesky<f64, Dyn> {
    let n = sc.qp.num_variables();
    let mut k = sc.qp.p.clone();
    let ks = k.as_mut_slice();
    for (kv, av) in ks.iter_mut().zip(sc.ata.as_slice()) {
        *kv += rho * av;
    }
    for i in 0..n {
        k[(i, i)] += sigma;
    }
    // P is PSD and σ > 0, so the matrix is positive definite.
    Cholesky::new(k).expect("P + σI + ρAᵀA must be positive definite")
}

impl Scaled {
    fn unscale_x(&self, xs: &DVector<f64>) -> DVector<f64> {
        xs.component_mul(&self.d)
    }

    fn unscale_z(&self, zs: &DVector<f64>) -> DVector<f64> {
        zs.component_div(&self.e)
    }

    fn unscale_y(&self, ys: &DVector<f64>) -> DVector<f64> {
        ys.component_mul(&self.e) / self.c
    }
}

pub fn solve(qp: &QuadraticProgram, settings: &SolverSettings, warm: Option<&WarmStart>) -> Solution {
    let n = qp.num_variables();
    let m = qp.num_constraints();
    let tol = settings.tolerance;
    let sigma = settings.sigma;
    let alpha = settings.alpha;
    let sc = equilibrate(qp);
    let sq = &sc.qp;
    let mut rho = warm.and_then(|w| w.rho).filter(|r| r.is_finite() && *r > 0.0).unwrap_or(settings.rho);
    let mut rho_epoch = 0usize;
    let mut chol = factor(&sc, sigma, rho);

    let mut x = DVector::<f64>::zeros(n);
    let mut y = DVector::<f64>::zeros(m);
    if let Some(ws) = warm {
        if ws.z.len() == n && ws.y.len() == m {
            x = ws.z.component_div(&sc.d);
            y = ws.y.component_div(&sc.e) * sc.c;
        }
    }
    let mut z = DVector::<f64>::zeros(m);
    if m > 0 {
        mat_vec(&sq.a, x.as_slice(), z.as_mut_slice());
        for i in 0..m {
            z[i] = z[i].min(sq.b[i]);
        }
    }

    let mut rhs = DVector::<f64>::zeros(n);
    let mut tmp_m = DVector::<f64>::zeros(m);
    let mut x_tilde = DVector::<f64>::zeros(n);
    let mut z_tilde = DVector::<f64>::zeros(m);
    let mut x_prev = DVector::<f64>::zeros(n);
    let mut y_prev = DVector::<f64>::zeros(m);
    let mut s_prev = DVector::<f64>::zeros(m);
    let mut ax = DVector::<f64>::zeros(m);
    let mut px = DVector::<f64>::zeros(n);
    let mut aty = DVector::<f64>::zeros(n);
    let mut trace = Vec::new();
    let eps_inf = settings.infeasibility_tolerance;

    let try_polish = |x: &DVector<f64>, z: &DVector<f64>, y: &DVector<f64>| polish(qp, &sc.unscale_x(x), &sc.unscale_z(z), &sc.unscale_y(y), tol);

    for iter in 1..=settings.max_iterations {
        x_prev.copy_from(&x);
        y_prev.copy_from(&y);
        if settings.record_trace {
            for i in 0..m {
                s_prev[i] = z[i] + y[i] / rho;
            }
        }

        // (P + σI + ρAᵀA) x̃ = σx − q + Aᵀ(ρz − y)
        for i in 0..m {
            tmp_m[i] = rho * z[i] - y[i];
        }
        rhs.copy_from(&x);
        rhs *= sigma;
        rhs -= &sq.q;
        if m > 0 {
            mat_tr_vec_add(&sq.a, tmp_m.as_slice(), rhs.as_mut_slice());
        }
        x_tilde.copy_from(&rhs);
        chol.solve_mut(&mut x_tilde);
        if m > 0 {
            mat_vec(&sq.a, x_tilde.as_slice(), z_tilde.as_mut_slice());
        }
        for i in 0..n {
            x[i] = alpha * x_tilde[i] + (1.0 - alpha) * x[i];
        }
        for i in 0..m {
            let zr = alpha * z_tilde[i] + (1.0 - alpha) * z[i];
            let z_new = (zr + y[i] / rho).min(sq.b[i]);
            y[i] += rho * (zr - z_new);
            z[i] = z_new;
        }

        if settings.record_trace && iter % 100 == 0 {
            let mut acc = 0.0;
            for i in 0..n {
                acc += sigma * (x[i] - x_prev[i]).powi(2);
            }
            for i in 0..m {
                acc += rho * (z[i] + y[i] / rho - s_prev[i]).powi(2);
            }
            trace.push(MeritSample {
                iteration: iter,
                merit: acc.sqrt(),
                rho_epoch,
            });
        }

        // Residuals of the original problem.
        if m > 0 {
            mat_vec(&sq.a, x.as_slice(), ax.as_mut_slice());
            aty.fill(0.0);
            mat_tr_vec_add(&sq.a, y.as_slice(), aty.as_mut_slice());
        }
        mat_vec(&sq.p, x.as_slice(), px.as_mut_slice());
        let mut r_prim = 0.0_f64;
        for i in 0..m {
            r_prim = r_prim.max(((ax[i] - z[i]) / sc.e[i]).abs());
        }
        let mut r_dual = 0.0_f64;
        for j in 0..n {
            r_dual = r_dual.max(((px[j] + sq.q[j] + aty[j]) / sc.d[j]).abs());
        }
        r_dual /= sc.c;

        if r_prim <= tol && r_dual <= tol {
            if settings.polish {
                if let Some((xp, yp)) = try_polish(&x, &z, &y) {
                    return finish(qp, xp, yp, SolveStatus::Optimal, iter, true, rho, trace);
                }
            }
            let (xu, yu) = (sc.unscale_x(&x), sc.unscale_y(&y));
            let res = check_kkt(qp, &xu, &yu);
            if res.primal_infeasibility <= tol && res.stationarity <= tol {
                return finish(qp, xu, yu, SolveStatus::Optimal, iter, false, rho, trace);
            }
        }

        // Infeasibility certificates, checked on the original data.
        if iter % 5 == 0 {
            if m > 0 {
                let dy_plus: DVector<f64> = sc.unscale_y(&(&y - &y_prev)).map(|v| v.max(0.0));
                let norm_dy = linalg::inf_norm(&dy_plus);
                if norm_dy > 1e-12 {
                    let at_dy = qp.a.tr_mul(&dy_plus);
                    if linalg::inf_norm(&at_dy) <= eps_inf * norm_dy && qp.b.dot(&dy_plus) < -eps_inf * norm_dy {
                        return finish(qp, sc.unscale_x(&x), sc.unscale_y(&y), SolveStatus::Infeasible, iter, false, rho, trace);
                    }
                }
            }
            let dx = sc.unscale_x(&(&x - &x_prev));
            let norm_dx = linalg::inf_norm(&dx);
            if norm_dx > 1e-12 {
                let p_dx = &qp.p * &dx;
                let a_dx_ok = m == 0 || (&qp.a * &dx).iter().all(|v| *v <= eps_inf * norm_dx);
                if linalg::inf_norm(&p_dx) <= eps_inf * norm_dx && qp.q.dot(&dx) < -eps_inf * norm_dx && a_dx_ok {
                    return finish(qp, sc.unscale_x(&x), sc.unscale_y(&y), SolveStatus::Unbounded, iter, false, rho, trace);
                }
            }
        }

        if iter % settings.adaptive_rho_interval == 0 {
            if settings.polish && r_prim <= settings.polish_trigger && r_dual <= settings.polish_trigger {
                if let Some((xp, yp)) = try_polish(&x, &z, &y) {
                    return finish(qp, xp, yp, SolveStatus::Optimal, iter, true, rho, trace);
                }
            }
            if settings.adaptive_rho && m > 0 {
                let mut sp = 0.0_f64;
                let mut rp = 0.0_f64;
                for i in 0..m {
                    sp = sp.max(ax[i].abs()).max(z[i].abs());
                    rp = rp.max((ax[i] - z[i]).abs());
                }
                let mut sd = sq.q.amax();
                let mut rd = 0.0_f64;
                for j in 0..n {
                    sd = sd.max(px[j].abs()).max(aty[j].abs());
                    rd = rd.max((px[j] + sq.q[j] + aty[j]).abs());
                }
                let num = rp / sp.max(1e-30);
                let den = rd / sd.max(1e-30);
                if num > 0.0 && den > 0.0 {
                    let new_rho = (rho * (num / den).sqrt()).clamp(1e-6, 1e6);
                    if new_rho > 5.0 * rho || new_rho < 0.2 * rho {
                        rho = new_rho;
                        rho_epoch += 1;
                        chol = factor(&sc, sigma, rho);
                    }
                }
            }
        }
    }

    if settings.polish {
        if let Some((xp, yp)) = try_polish(&x, &z, &y) {
            return finish(qp, xp, yp, SolveStatus::Optimal, settings.max_iterations, true, rho, trace);
        }
    }
    finish(qp, sc.unscale_x(&x), sc.unscale_y(&y), SolveStatus::MaxIterations, settings.max_iterations, false, rho, trace)
}
