//! Closed-loop Monte Carlo simulation.
//!
//! Every `κ` steps the controller measures the state, solves the policy QP
//! and transmits according to the protocol. The actuator applies whatever it
//! received (or has buffered), the plant steps, and the controller
//! reconstructs the noise from the acknowledged control and the next state.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::channel::{self, ChannelModel, Protocol};
use crate::error::{Result, SmpcError};
use crate::lifting;
use crate::model::{LinearSystem, NoiseModel, ReachabilityData};
use crate::moments::{self, NoiseMoments, SaturationSpec};
use crate::qp::{self, SolveStatus, SolverSettings};
use crate::smpc::{self, DecisionLayout, GainMask, PolicyParams, PolicyProblem, PolicyQp, StabilityConfig};

/// Warn when the reconstructed noise differs from the true one by more
/// than this (it is exact up to rounding).
const RECONSTRUCTION_WARN: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub sys: LinearSystem,
    pub noise: NoiseModel,
    pub channel: ChannelModel,
    pub protocol: Protocol,
    /// Optimisation horizon `N`.
    pub horizon: usize,
    pub q: DMatrix<f64>,
    pub q_f: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub stability: StabilityConfig,
    pub saturation: SaturationSpec,
    /// Largest noise lag fed back by the gain; `None` keeps all blocks.
    pub gain_max_lag: Option<usize>,
    pub x0: DVector<f64>,
    /// Simulated steps `T` (a multiple of `κ`).
    pub steps: usize,
    pub paths: usize,
    pub seed: u64,
    /// Success probability assumed when computing the selection moments.
    /// Defaults to the channel's mean success rate.
    pub design_p: Option<f64>,
    pub moment_samples: usize,
    pub moment_seed: u64,
    pub solver: SolverSettings,
    pub warm_start: bool,
    /// Keep the per-interval policy logs in each record.
    pub record_intervals: bool,
}

impl SimConfig {
    /// The three-state example plant with the i.i.d. `p = 0.8` channel.
    pub fn example(protocol: Protocol) -> Self {
        let sys = LinearSystem::three_state_example();
        let reach = ReachabilityData::new(&sys).expect("example plant is reachable");
        let stability = StabilityConfig::new(0.4729, 0.02, 0.4729, Default::default(), &sys, &reach).expect("example drift settings are admissible");
        Self {
            noise: NoiseModel::isotropic(3, 2.0).expect("valid covariance"),
            channel: ChannelModel::iid(0.8).expect("valid probability"),
            protocol,
            horizon: 4,
            q: DMatrix::identity(3, 3),
            q_f: DMatrix::from_row_slice(3, 3, &[12.0, -0.1, -0.4, -0.1, 19.0, -0.2, -0.4, -0.2, 2.0]),
            r: DMatrix::from_element(1, 1, 2.0),
            stability,
            saturation: SaturationSpec::Sigmoid,
            gain_max_lag: None,
            x0: DVector::from_column_slice(&[10.0, 10.0, -10.0]),
            steps: 201,
            paths: 300,
            seed: 1,
            design_p: None,
            moment_samples: moments::DEFAULT_MOMENT_SAMPLES,
            moment_seed: 7,
            solver: SolverSettings::default(),
            warm_start: true,
            record_intervals: false,
            sys,
        }
    }

    pub fn design_probability(&self) -> f64 {
        self.design_p.unwrap_or_else(|| self.channel.mean_success_rate())
    }

    /// Structural checks that do not require solving anything. Returns every
    /// violation found.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let d = self.sys.state_dim();
        let report = crate::model::verify_decomposition(&self.sys);
        if !report.passed() {
            out.push(format!(
                "plant decomposition check failed (orthogonality residual {:e}, coupling residual {:e}, Schur spectral radius {})",
                report.orthogonality_residual, report.coupling_residual, report.schur_spectral_radius
            ));
        }
        match ReachabilityData::new(&self.sys) {
            Ok(reach) => {
                if reach.kappa > self.horizon {
                    out.push(format!("horizon N = {} is smaller than the reachability index {}", self.horizon, reach.kappa));
                } else if self.steps % reach.kappa != 0 {
                    out.push(format!("steps = {} is not a multiple of the recalculation interval {}", self.steps, reach.kappa));
                }
                let limit = reach.zeta_upper_limit(&self.sys);
                if !(self.stability.zeta > 0.0 && self.stability.zeta < limit) {
                    out.push(format!("zeta = {} outside the open interval ]0, {limit}[", self.stability.zeta));
                }
            }
            Err(e) => out.push(e.to_string()),
        }
        if !(self.stability.r > 0.0) || !(self.stability.epsilon > 0.0) {
            out.push("stability r and epsilon must be positive".into());
        }
        if self.noise.dim() != d {
            out.push(format!("noise dimension {} differs from state dimension {d}", self.noise.dim()));
        }
        if self.x0.len() != d {
            out.push(format!("x0 has length {}, expected {d}", self.x0.len()));
        }
        if self.horizon == 0 {
            out.push("horizon must be positive".into());
        }
        if self.paths == 0 {
            out.push("paths must be positive".into());
        }
        if self.steps == 0 {
            out.push("steps must be positive".into());
        }
        if let Some(p) = self.design_p {
            if !(p > 0.0 && p <= 1.0) {
                out.push(format!("design_p = {p} outside ]0, 1]"));
            }
        }
        if let Err(e) = lifting::build_cost_blocks(&self.q, &self.q_f, &self.r, self.horizon.max(1)) {
            out.push(e.to_string());
        } else if self.q.nrows() != d || self.r.nrows() != self.sys.input_dim() {
            out.push("cost weight dimensions do not match the plant".into());
        }
        if let Err(e) = self.solver.validate() {
            out.push(e.to_string());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(SmpcError::param("simulation config", v.join("; ")))
        }
    }

    pub fn estimate_noise_moments(&self, cache_dir: Option<&Path>) -> Result<NoiseMoments> {
        moments::load_or_estimate(cache_dir, &self.noise, &self.saturation, self.horizon, self.moment_samples, self.moment_seed)
    }
}

/// Controller-side data fixed for a whole run.
#[derive(Debug, Clone)]
pub struct Controller {
    pub problem: PolicyProblem,
    pub protocol: Protocol,
    pub saturation: SaturationSpec,
    pub solver: SolverSettings,
    pub warm_start: bool,
}

impl Controller {
    pub fn design(cfg: &SimConfig, noise_moments: &NoiseMoments) -> Result<Self> {
        cfg.validate()?;
        let sys = cfg.sys.clone();
        let reach = ReachabilityData::new(&sys)?;
        let n = cfg.horizon;
        let m = sys.input_dim();
        let lifted = lifting::build_state_lift(&sys, n)?;
        let costs = lifting::build_cost_blocks(&cfg.q, &cfg.q_f, &cfg.r, n)?;
        let m_mat = lifted.cal_b.transpose() * &costs.cal_q * &lifted.cal_b + &costs.cal_r;
        let pm = channel::exact_protocol_moments(cfg.protocol, cfg.design_probability(), &m_mat, n, m, reach.kappa)?;
        let mut mask = GainMask::strictly_lower(n);
        if let Some(lag) = cfg.gain_max_lag {
            mask = mask.with_max_lag(lag);
        }
        let layout = DecisionLayout::new(n, m, sys.state_dim(), &mask)?;
        let template = smpc::build_objective_template(&layout, &lifted, &costs, &pm, noise_moments)?;
        let problem = PolicyProblem::new(sys, reach, cfg.stability, template, cfg.saturation.phi_max())?;
        Ok(Self {
            problem,
            protocol: cfg.protocol,
            saturation: cfg.saturation,
            solver: cfg.solver.clone(),
            warm_start: cfg.warm_start,
        })
    }

    pub fn kappa(&self) -> usize {
        self.problem.kappa()
    }
}

/// Contents of one transmission to the actuator.
#[derive(Debug, Clone, PartialEq)]
pub struct Packet {
    /// Per-step value: full control (TP1, TP3) or feedback only (TP2).
    pub value: DVector<f64>,
    /// Offset blocks `start, start+1, …` stacked, if the packet carries them.
    pub offsets: Option<(usize, DVector<f64>)>,
}

/// Offset buffer at the actuator, emptied at every recalculation instant.
#[derive(Debug, Clone, PartialEq)]
pub struct ActuatorState {
    m: usize,
    buffer: Option<(usize, DVector<f64>)>,
}

impl ActuatorState {
    pub fn new(m: usize) -> Self {
        Self { m, buffer: None }
    }

    pub fn clear(&mut self) {
        self.buffer = None;
    }

    pub fn is_filled(&self) -> bool {
        self.buffer.is_some()
    }

    /// Buffered offset for step `l` of the interval, if any.
    pub fn offset(&self, l: usize) -> Option<DVector<f64>> {
        let (start, v) = self.buffer.as_ref()?;
        if l < *start || (l - start + 1) * self.m > v.len() {
            return None;
        }
        Some(v.rows((l - start) * self.m, self.m).into_owned())
    }
}

/// What the actuator applies at step `l` of an interval. `received` is
/// `None` when the packet was dropped.
pub fn actuator_step(protocol: Protocol, state: &mut ActuatorState, received: Option<&Packet>, l: usize) -> DVector<f64> {
    let zero = DVector::zeros(state.m);
    match protocol {
        Protocol::Tp1 => received.map_or(zero, |p| p.value.clone()),
        Protocol::Tp2 => {
            if let Some(Packet { offsets: Some(o), .. }) = received {
                state.buffer = Some(o.clone());
            }
            let offset = state.offset(l).unwrap_or(zero);
            match received {
                Some(p) => offset + &p.value,
                None => offset,
            }
        }
        Protocol::Tp3 => match received {
            Some(p) => {
                if let Some(o) = &p.offsets {
                    state.buffer = Some(o.clone());
                }
                p.value.clone()
            }
            None => state.offset(l).unwrap_or(zero),
        },
    }
}

/// Packet the controller sends at step `l`, given the policy, the feedback
/// term for that step and whether the actuator buffer is known to be filled.
pub fn controller_packet(protocol: Protocol, policy: &PolicyParams, feedback: &DVector<f64>, l: usize, kappa: usize, buffer_filled: bool) -> Packet {
    let m = feedback.len();
    let eta_l = policy.eta.rows(l * m, m).into_owned();
    match protocol {
        Protocol::Tp1 => Packet {
            value: eta_l + feedback,
            offsets: None,
        },
        Protocol::Tp2 => Packet {
            value: feedback.clone(),
            offsets: (l == 0).then(|| (0, policy.eta.rows(0, kappa * m).into_owned())),
        },
        Protocol::Tp3 => {
            let burst = !buffer_filled && l + 2 <= kappa;
            Packet {
                value: eta_l + feedback,
                offsets: burst.then(|| (l + 1, policy.eta.rows((l + 1) * m, (kappa - l - 1) * m).into_owned())),
            }
        }
    }
}

/// Policy and realised quantities of one recalculation interval.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalLog {
    pub t0: usize,
    pub policy: PolicyParams,
    /// Saturated reconstructed noise, `(N−1)d`, filled for the first `κ−1`
    /// steps of the interval.
    pub e: DVector<f64>,
    pub nu: Vec<bool>,
    pub status: SolveStatus,
    pub iterations: usize,
    pub used_fallback: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationRecord {
    pub path: usize,
    /// `(T+1) × d`.
    pub states: DMatrix<f64>,
    /// `T × m`.
    pub controls: DMatrix<f64>,
    /// `T × d`, the true process noise.
    pub noises: DMatrix<f64>,
    pub dropouts: Vec<bool>,
    pub stage_costs: Vec<f64>,
    pub solves: usize,
    pub fallbacks: usize,
    pub iterations: Vec<usize>,
    pub max_reconstruction_error: f64,
    pub intervals: Vec<IntervalLog>,
}

impl SimulationRecord {
    pub fn steps(&self) -> usize {
        self.controls.nrows()
    }

    /// Time-average of `‖u^a_t‖²`.
    pub fn actuator_energy(&self) -> f64 {
        let t = self.steps();
        (0..t).map(|i| self.controls.row(i).norm_squared()).sum::<f64>() / t as f64
    }
}

fn path_rngs(seed: u64, path: usize) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut noise = ChaCha8Rng::seed_from_u64(seed);
    noise.set_stream(2 * path as u64);
    let mut chan = ChaCha8Rng::seed_from_u64(seed);
    chan.set_stream(2 * path as u64 + 1);
    (noise, chan)
}

/// Noise and dropout realisations of one path. They depend only on the seed,
/// the path index, the covariance and the channel, so different protocols
/// (and, for i.i.d. channels, different `p`) share them pathwise.
pub fn sample_path_randomness(cfg: &SimConfig, path: usize) -> (DMatrix<f64>, Vec<bool>) {
    let (mut rng_w, mut rng_c) = path_rngs(cfg.seed, path);
    let d = cfg.noise.dim();
    let mut w = DMatrix::zeros(cfg.steps, d);
    let mut scratch = vec![0.0; d];
    let mut buf = vec![0.0; d];
    for t in 0..cfg.steps {
        cfg.noise.sample_into(&mut rng_w, &mut scratch, &mut buf);
        for j in 0..d {
            w[(t, j)] = buf[j];
        }
    }
    let nu = channel::sample_dropouts(&cfg.channel, cfg.steps, &mut rng_c);
    (w, nu)
}

/// Simulates one path with given noise and dropout sequences.
pub fn simulate_path(controller: &Controller, cfg: &SimConfig, path: usize, w: &DMatrix<f64>, nu: &[bool]) -> Result<SimulationRecord> {
    let sys = &controller.problem.sys;
    let d = sys.state_dim();
    let m = sys.input_dim();
    let n = controller.problem.horizon();
    let kappa = controller.kappa();
    let steps = w.nrows();
    if steps % kappa != 0 || nu.len() != steps {
        return Err(SmpcError::param("steps", format!("{steps} steps do not form whole intervals of {kappa}")));
    }
    let u_max = sys.u_max();
    let phi = controller.problem.phi_max;

    let mut states = DMatrix::zeros(steps + 1, d);
    let mut controls = DMatrix::zeros(steps, m);
    let mut stage_costs = Vec::with_capacity(steps);
    let mut x = cfg.x0.clone();
    states.row_mut(0).copy_from(&x.transpose());
    let mut iterations = Vec::new();
    let mut fallbacks = 0;
    let mut max_rec = 0.0_f64;
    let mut intervals = Vec::new();
    let mut prev: Option<(PolicyQp, qp::Solution)> = None;
    let mut actuator = ActuatorState::new(m);

    for t0 in (0..steps).step_by(kappa) {
        let pqp = controller.problem.assemble(&x, t0)?;
        let warm = match (&prev, controller.warm_start) {
            (Some((pq, ps)), true) => Some(pqp.warm_start_from(pq, ps)),
            _ => None,
        };
        let sol = qp::solve(&pqp.qp, &controller.solver, warm.as_ref());
        iterations.push(sol.iterations);
        let (policy, used_fallback) = if sol.status == SolveStatus::Optimal {
            let mut p = pqp.policy(&sol.z);
            p.restore_bounds(phi, u_max);
            (p, false)
        } else {
            log::warn!("path {path}, t = {t0}: solver returned {}; applying fallback policy", sol.status);
            fallbacks += 1;
            let mut p = controller.problem.fallback(&x, t0);
            p.restore_bounds(phi, u_max);
            (p, true)
        };
        let status = sol.status;
        let iters = sol.iterations;
        prev = if sol.status == SolveStatus::Optimal { Some((pqp, sol)) } else { None };

        actuator.clear();
        let mut e = DVector::zeros(n.saturating_sub(1) * d);
        for l in 0..kappa {
            let t = t0 + l;
            let row = policy.theta.rows(l * m, m);
            let feedback: DVector<f64> = row * &e;
            let packet = controller_packet(controller.protocol, &policy, &feedback, l, kappa, actuator.is_filled());
            let u = actuator_step(controller.protocol, &mut actuator, nu[t].then_some(&packet), l);
            let wt = w.row(t).transpose();
            let x_next = sys.step(&x, &u, &wt);

            stage_costs.push(x.dot(&(&cfg.q * &x)) + u.dot(&(&cfg.r * &u)));
            controls.row_mut(t).copy_from(&u.transpose());
            states.row_mut(t + 1).copy_from(&x_next.transpose());

            let w_hat = &x_next - sys.a() * &x - sys.b() * &u;
            let err = (&w_hat - &wt).amax();
            if err > RECONSTRUCTION_WARN {
                log::warn!("path {path}, t = {t}: noise reconstruction error {err:e}");
            }
            max_rec = max_rec.max(err);
            if l < n - 1 {
                for j in 0..d {
                    e[l * d + j] = controller.saturation.apply_scalar(w_hat[j]);
                }
            }
            x = x_next;
        }
        if cfg.record_intervals {
            intervals.push(IntervalLog {
                t0,
                policy,
                e,
                nu: nu[t0..t0 + kappa].to_vec(),
                status,
                iterations: iters,
                used_fallback,
            });
        }
    }

    Ok(SimulationRecord {
        path,
        states,
        controls,
        noises: w.clone(),
        dropouts: nu.to_vec(),
        stage_costs,
        solves: iterations.len(),
        fallbacks,
        iterations,
        max_reconstruction_error: max_rec,
        intervals,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    /// Mean over paths of `‖x_t‖`, `t = 0..=T`.
    pub avg_state_norm: Vec<f64>,
    /// Mean over paths of `‖x_t‖²`.
    pub mean_square_norm: Vec<f64>,
    pub actuator_energy: f64,
    pub avg_cost_per_stage: f64,
    /// `max_t` of `mean_square_norm`.
    pub empirical_msb: f64,
    pub solves: usize,
    pub fallbacks: usize,
    pub mean_iterations: f64,
    pub max_abs_control: f64,
    pub max_reconstruction_error: f64,
}

impl Metrics {
    /// `(name, value)` pairs in the order written to `metrics.csv`.
    pub fn scalars(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("actuator_energy", self.actuator_energy),
            ("avg_cost_per_stage", self.avg_cost_per_stage),
            ("empirical_msb", self.empirical_msb),
            ("solves", self.solves as f64),
            ("fallbacks", self.fallbacks as f64),
            ("mean_solver_iterations", self.mean_iterations),
            ("max_abs_control", self.max_abs_control),
            ("max_noise_reconstruction_error", self.max_reconstruction_error),
        ]
    }
}

/// Reduces records in path order, so the result does not depend on how the
/// paths were scheduled.
pub fn compute_metrics(records: &[SimulationRecord]) -> Result<Metrics> {
    let first = records.first().ok_or_else(|| SmpcError::param("records", "need at least one path"))?;
    let mut sorted: Vec<&SimulationRecord> = records.iter().collect();
    sorted.sort_by_key(|r| r.path);
    let np = records.len() as f64;
    let horizon = first.states.nrows();
    let mut norm = vec![0.0; horizon];
    let mut sq = vec![0.0; horizon];
    let mut energy = 0.0;
    let mut cost = 0.0;
    let mut solves = 0;
    let mut fallbacks = 0;
    let mut iters = 0usize;
    let mut max_u = 0.0_f64;
    let mut max_rec = 0.0_f64;
    for r in &sorted {
        if r.states.nrows() != horizon {
            return Err(SmpcError::dim("record length", horizon, r.states.nrows()));
        }
        for t in 0..horizon {
            let s = r.states.row(t).norm_squared();
            norm[t] += s.sqrt();
            sq[t] += s;
        }
        energy += r.actuator_energy();
        cost += r.stage_costs.iter().sum::<f64>() / r.stage_costs.len().max(1) as f64;
        solves += r.solves;
        fallbacks += r.fallbacks;
        iters += r.iterations.iter().sum::<usize>();
        max_u = max_u.max(r.controls.amax());
        max_rec = max_rec.max(r.max_reconstruction_error);
    }
    for v in norm.iter_mut().chain(sq.iter_mut()) {
        *v /= np;
    }
    let msb = sq.iter().cloned().fold(0.0_f64, f64::max);
    Ok(Metrics {
        avg_state_norm: norm,
        mean_square_norm: sq,
        actuator_energy: energy / np,
        avg_cost_per_stage: cost / np,
        empirical_msb: msb,
        solves,
        fallbacks,
        mean_iterations: if solves > 0 { iters as f64 / solves as f64 } else { 0.0 },
        max_abs_control: max_u,
        max_reconstruction_error: max_rec,
    })
}

/// Runs every path of `cfg` with an already designed controller.
pub fn run_paths_with(controller: &Controller, cfg: &SimConfig) -> Result<(Vec<SimulationRecord>, Metrics)> {
    let records: Vec<SimulationRecord> = (0..cfg.paths)
        .into_par_iter()
        .map(|path| {
            let (w, nu) = sample_path_randomness(cfg, path);
            simulate_path(controller, cfg, path, &w, &nu)
        })
        .collect::<Result<_>>()?;
    let metrics = compute_metrics(&records)?;
    Ok((records, metrics))
}

/// Estimates the noise moments, designs the controller and runs all paths.
pub fn run_paths(cfg: &SimConfig) -> Result<(Vec<SimulationRecord>, Metrics)> {
    let nm = cfg.estimate_noise_moments(None)?;
    let controller = Controller::design(cfg, &nm)?;
    run_paths_with(&controller, cfg)
}

fn fmt_f(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn trajectories_csv(records: &[SimulationRecord]) -> String {
    let Some(first) = records.first() else {
        return String::new();
    };
    let d = first.states.ncols();
    let m = first.controls.ncols();
    let mut s = String::from("path,t");
    for i in 1..=d {
        let _ = write!(s, ",x{i}");
    }
    for i in 1..=m {
        let _ = write!(s, ",u{i}");
    }
    s.push_str(",nu\n");
    for r in records {
        let steps = r.steps();
        for t in 0..=steps {
            let _ = write!(s, "{},{}", r.path, t);
            for j in 0..d {
                let _ = write!(s, ",{}", fmt_f(r.states[(t, j)]));
            }
            // The final state has no control or dropout.
            for j in 0..m {
                if t < steps {
                    let _ = write!(s, ",{}", fmt_f(r.controls[(t, j)]));
                } else {
                    s.push(',');
                }
            }
            if t < steps {
                let _ = writeln!(s, ",{}", u8::from(r.dropouts[t]));
            } else {
                s.push_str(",\n");
            }
        }
    }
    s
}

pub fn metrics_csv(metrics: &Metrics) -> String {
    let mut s = String::from("metric,value\n");
    for (k, v) in metrics.scalars() {
        let _ = writeln!(s, "{k},{}", fmt_f(v));
    }
    s
}

pub fn norm_series_csv(metrics: &Metrics) -> String {
    let mut s = String::from("t,avg_norm\n");
    for (t, v) in metrics.avg_state_norm.iter().enumerate() {
        let _ = writeln!(s, "{t},{}", fmt_f(*v));
    }
    s
}

/// Writes `trajectories.csv`, `metrics.csv` and `norm_series.csv` into `dir`.
pub fn write_outputs(dir: &Path, records: &[SimulationRecord], metrics: &Metrics) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("trajectories.csv"), trajectories_csv(records))?;
    fs::write(dir.join("metrics.csv"), metrics_csv(metrics))?;
    fs::write(dir.join("norm_series.csv"), norm_series_csv(metrics))?;
    Ok(())
}
