//! Erasure channel models, the three transmission protocols and the moments
//! of their dropout selection matrices.
//!
//! All selection matrices are diagonal: block `i` of the stacked control is
//! scaled by a scalar that depends on the dropouts `ν_t … ν_{t+κ−1}` of one
//! recalculation interval. Blocks `κ..N` are never sent within the interval
//! and are left untouched.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SmpcError};

/// Largest κ for which [`exact_protocol_moments`] enumerates all patterns.
pub const MAX_ENUMERATION_KAPPA: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Protocol {
    /// Per-step transmission of the full control value.
    Tp1,
    /// Offset burst at the start of the interval plus per-step feedback.
    Tp2,
    /// Per-step control plus retransmission of the remaining offsets until
    /// the first success.
    Tp3,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::Tp1, Protocol::Tp2, Protocol::Tp3];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::Tp1 => "tp1",
            Protocol::Tp2 => "tp2",
            Protocol::Tp3 => "tp3",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Protocol {
    type Err = SmpcError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tp1" => Ok(Protocol::Tp1),
            "tp2" => Ok(Protocol::Tp2),
            "tp3" => Ok(Protocol::Tp3),
            _ => Err(SmpcError::param("protocol", format!("unknown protocol `{s}` (expected tp1, tp2 or tp3)"))),
        }
    }
}

/// Network-state process modulating the per-step success probability.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovChannel {
    success: Vec<f64>,
    transition: DMatrix<f64>,
    initial_state: usize,
}

impl MarkovChannel {
    pub fn new(success: Vec<f64>, transition: DMatrix<f64>, initial_state: usize) -> Result<Self> {
        let k = success.len();
        if k == 0 {
            return Err(SmpcError::param("channel.success", "need at least one network state"));
        }
        if transition.shape() != (k, k) {
            return Err(SmpcError::dim("channel transition matrix", format!("{k}x{k}"), format!("{}x{}", transition.nrows(), transition.ncols())));
        }
        for (i, p) in success.iter().enumerate() {
            if !(*p > 0.0 && *p <= 1.0) {
                return Err(SmpcError::param("channel.success", format!("state {i}: probability {p} outside ]0,1]")));
            }
        }
        for i in 0..k {
            let row = transition.row(i);
            if row.iter().any(|v| *v < 0.0 || !v.is_finite()) {
                return Err(SmpcError::param("channel.transition", format!("row {i} has a negative or non-finite entry")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-12 {
                return Err(SmpcError::param("channel.transition", format!("row {i} sums to {s}, not 1")));
            }
        }
        if initial_state >= k {
            return Err(SmpcError::param("channel.initial_state", format!("{initial_state} is not a state index below {k}")));
        }
        Ok(Self {
            success,
            transition,
            initial_state,
        })
    }

    pub fn success(&self) -> &[f64] {
        &self.success
    }

    pub fn transition(&self) -> &DMatrix<f64> {
        &self.transition
    }

    pub fn initial_state(&self) -> usize {
        self.initial_state
    }

    pub fn num_states(&self) -> usize {
        self.success.len()
    }

    /// Stationary distribution `π` with `πᵀ P = πᵀ`, `Σπ = 1`.
    pub fn stationary_distribution(&self) -> DVector<f64> {
        let k = self.num_states();
        // Replace the last equation of (Pᵀ − I) π = 0 by the normalisation.
        let mut a = self.transition.transpose() - DMatrix::<f64>::identity(k, k);
        let mut rhs = DVector::zeros(k);
        for j in 0..k {
            a[(k - 1, j)] = 1.0;
        }
        rhs[k - 1] = 1.0;
        a.lu().solve(&rhs).unwrap_or_else(|| DVector::from_element(k, 1.0 / k as f64))
    }

    fn next_state(&self, state: usize, u: f64) -> usize {
        let mut acc = 0.0;
        let row = self.transition.row(state);
        for (j, p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return j;
            }
        }
        // Rounding left `u` above the last partial sum.
        (0..row.len()).rev().find(|&j| row[j] > 0.0).unwrap_or(row.len() - 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ChannelModel {
    Iid { p: f64 },
    MarkovNetworkState(MarkovChannel),
}

impl ChannelModel {
    pub fn iid(p: f64) -> Result<Self> {
        if !(p > 0.0 && p <= 1.0) {
            return Err(SmpcError::param("channel.p", format!("success probability {p} outside ]0,1]")));
        }
        Ok(ChannelModel::Iid { p })
    }

    pub fn markov(success: Vec<f64>, transition: DMatrix<f64>, initial_state: usize) -> Result<Self> {
        MarkovChannel::new(success, transition, initial_state).map(ChannelModel::MarkovNetworkState)
    }

    /// Two-state good/bad channel: success 0.8 in the good state and 0.4 in
    /// the bad one, bad→good with probability 0.9 and good→bad with 0.3.
    pub fn good_bad_example() -> Self {
        let transition = DMatrix::from_row_slice(2, 2, &[0.7, 0.3, 0.9, 0.1]);
        Self::markov(vec![0.8, 0.4], transition, 0).expect("example channel is valid")
    }

    /// Long-run fraction of successful transmissions.
    pub fn mean_success_rate(&self) -> f64 {
        match self {
            ChannelModel::Iid { p } => *p,
            ChannelModel::MarkovNetworkState(mc) => {
                let pi = mc.stationary_distribution();
                pi.iter().zip(mc.success.iter()).map(|(a, b)| a * b).sum()
            }
        }
    }

    pub fn sampler(&self) -> DropoutSampler<'_> {
        let state = match self {
            ChannelModel::Iid { .. } => 0,
            ChannelModel::MarkovNetworkState(mc) => mc.initial_state,
        };
        DropoutSampler { channel: self, state }
    }

    /// A sampler whose network state is drawn from the stationary
    /// distribution instead of the configured initial state.
    pub fn stationary_sampler<R: Rng + ?Sized>(&self, rng: &mut R) -> DropoutSampler<'_> {
        let state = match self {
            ChannelModel::Iid { .. } => 0,
            ChannelModel::MarkovNetworkState(mc) => {
                let pi = mc.stationary_distribution();
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = mc.num_states() - 1;
                for (i, p) in pi.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        pick = i;
                        break;
                    }
                }
                pick
            }
        };
        DropoutSampler { channel: self, state }
    }
}

/// Stateful dropout generator. Successes are drawn as `U < p` from one
/// uniform per step, so runs that share a random stream but differ in `p`
/// see pathwise ordered dropouts.
#[derive(Debug, Clone)]
pub struct DropoutSampler<'a> {
    channel: &'a ChannelModel,
    state: usize,
}

impl DropoutSampler<'_> {
    pub fn network_state(&self) -> usize {
        self.state
    }

    pub fn next<R: Rng + ?Sized>(&mut self, rng: &mut R) -> bool {
        match self.channel {
            ChannelModel::Iid { p } => rng.random::<f64>() < *p,
            ChannelModel::MarkovNetworkState(mc) => {
                let nu = rng.random::<f64>() < mc.success[self.state];
                let u: f64 = rng.random();
                self.state = mc.next_state(self.state, u);
                nu
            }
        }
    }
}

/// Dropout sequence `ν_0 … ν_{horizon−1}` (`true` = delivered).
pub fn sample_dropouts<R: Rng + ?Sized>(channel: &ChannelModel, horizon: usize, rng: &mut R) -> Vec<bool> {
    let mut sampler = channel.sampler();
    (0..horizon).map(|_| sampler.next(rng)).collect()
}

/// One realisation of the dropouts of a recalculation interval and its
/// probability under an i.i.d. channel.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutPattern {
    pub nu: Vec<bool>,
    pub probability: f64,
}

/// All `2^κ` patterns under i.i.d. success probability `p`.
pub fn dropout_patterns(p: f64, kappa: usize) -> impl Iterator<Item = DropoutPattern> {
    (0u64..(1u64 << kappa)).map(move |bits| {
        let nu: Vec<bool> = (0..kappa).map(|i| bits >> i & 1 == 1).collect();
        let probability = nu.iter().map(|&v| if v { p } else { 1.0 - p }).product();
        DropoutPattern { nu, probability }
    })
}

/// `ρ_ℓ = 1 − ∏_{s ≤ ℓ} (1 − ν_s)`, computed by the incremental recursion.
pub fn rho_sequence(nu: &[bool]) -> Vec<f64> {
    let mut rho = Vec::with_capacity(nu.len());
    let mut all_dropped = 1.0;
    for (l, &v) in nu.iter().enumerate() {
        let v = if v { 1.0 } else { 0.0 };
        let prev = if l == 0 { 0.0 } else { rho[l - 1] };
        rho.push(prev + all_dropped * v);
        all_dropped *= 1.0 - v;
    }
    rho
}

/// Per-block scaling factors of the selection matrix (length `N`).
pub fn selection_factors(protocol: Protocol, nu: &[bool], horizon: usize) -> Vec<f64> {
    let kappa = nu.len();
    assert!(kappa <= horizon, "dropout pattern longer ({kappa}) than horizon ({horizon})");
    let mut f = vec![1.0; horizon];
    let as_f = |v: bool| if v { 1.0 } else { 0.0 };
    match protocol {
        Protocol::Tp1 => {
            for (i, &v) in nu.iter().enumerate() {
                f[i] = as_f(v);
            }
        }
        Protocol::Tp2 => {
            if let Some(&first) = nu.first() {
                for fi in f.iter_mut().take(kappa) {
                    *fi = as_f(first);
                }
            }
        }
        Protocol::Tp3 => {
            for (i, r) in rho_sequence(nu).into_iter().enumerate() {
                f[i] = r;
            }
        }
    }
    f
}

fn expand_diagonal(factors: &[f64], m: usize) -> DMatrix<f64> {
    let diag = DVector::from_fn(factors.len() * m, |i, _| factors[i / m]);
    DMatrix::from_diagonal(&diag)
}

/// `𝒮`: blocks `i < κ` scaled by `ν_i`.
pub fn build_selection_s(nu: &[bool], horizon: usize, m: usize) -> DMatrix<f64> {
    expand_diagonal(&selection_factors(Protocol::Tp1, nu, horizon), m)
}

/// `𝒦`: the whole burst shares the first dropout `ν_0`.
pub fn build_selection_k(nu: &[bool], horizon: usize, m: usize) -> DMatrix<f64> {
    expand_diagonal(&selection_factors(Protocol::Tp2, nu, horizon), m)
}

/// `𝒢`: blocks `i < κ` scaled by `ρ_i`. Square `Nm × Nm` so that it acts on
/// the full offset vector.
pub fn build_selection_g(nu: &[bool], horizon: usize, m: usize) -> DMatrix<f64> {
    expand_diagonal(&selection_factors(Protocol::Tp3, nu, horizon), m)
}

pub fn build_selection(protocol: Protocol, nu: &[bool], horizon: usize, m: usize) -> DMatrix<f64> {
    expand_diagonal(&selection_factors(protocol, nu, horizon), m)
}

/// First and second moments of the protocol's selection matrix `X` and of `𝒮`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolMoments {
    pub protocol: Protocol,
    /// `E[X]`.
    pub mu: DMatrix<f64>,
    /// `E[Xᵀ M X]`.
    pub sigma: DMatrix<f64>,
    /// `E[𝒮]`, used with the feedback gain in every protocol.
    pub mu_s: DMatrix<f64>,
    /// `E[𝒮ᵀ M 𝒮]`.
    pub sigma_s: DMatrix<f64>,
}

/// Running block-level sums for one selection family.
struct FactorMoments {
    mean: DVector<f64>,
    second: DMatrix<f64>,
}

impl FactorMoments {
    fn new(n: usize) -> Self {
        Self {
            mean: DVector::zeros(n),
            second: DMatrix::zeros(n, n),
        }
    }

    fn add(&mut self, f: &[f64], weight: f64) {
        for i in 0..f.len() {
            self.mean[i] += weight * f[i];
            for j in 0..f.len() {
                self.second[(i, j)] += weight * f[i] * f[j];
            }
        }
    }

    fn normalize(&mut self, count: f64) {
        self.mean /= count;
        self.second /= count;
    }

    /// (E[X], E[Xᵀ M X]) at the `Nm` level.
    fn finish(&self, m_mat: &DMatrix<f64>, m: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        let nm = m_mat.nrows();
        let mu = DMatrix::from_diagonal(&DVector::from_fn(nm, |i, _| self.mean[i / m]));
        let sigma = DMatrix::from_fn(nm, nm, |i, j| m_mat[(i, j)] * self.second[(i / m, j / m)]);
        (mu, sigma)
    }
}

fn check_moment_inputs(m_mat: &DMatrix<f64>, horizon: usize, m: usize, kappa: usize) -> Result<()> {
    if m == 0 || horizon == 0 {
        return Err(SmpcError::param("horizon", "horizon and input dimension must be positive"));
    }
    if m_mat.shape() != (horizon * m, horizon * m) {
        return Err(SmpcError::dim("moment weight M", format!("{0}x{0}", horizon * m), format!("{}x{}", m_mat.nrows(), m_mat.ncols())));
    }
    if kappa == 0 || kappa > horizon {
        return Err(SmpcError::param("kappa", format!("need 1 <= kappa <= N, got kappa = {kappa}, N = {horizon}")));
    }
    Ok(())
}

/// Exact moments by enumerating all `2^κ` dropout patterns of an i.i.d.
/// channel with success probability `p`.
pub fn exact_protocol_moments(protocol: Protocol, p: f64, m_mat: &DMatrix<f64>, horizon: usize, m: usize, kappa: usize) -> Result<ProtocolMoments> {
    check_moment_inputs(m_mat, horizon, m, kappa)?;
    if kappa > MAX_ENUMERATION_KAPPA {
        return Err(SmpcError::EnumerationTooLarge {
            kappa,
            limit: MAX_ENUMERATION_KAPPA,
        });
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(SmpcError::param("p", format!("success probability {p} outside ]0,1]")));
    }
    let mut x = FactorMoments::new(horizon);
    let mut s = FactorMoments::new(horizon);
    for pattern in dropout_patterns(p, kappa) {
        if pattern.probability == 0.0 {
            continue;
        }
        x.add(&selection_factors(protocol, &pattern.nu, horizon), pattern.probability);
        s.add(&selection_factors(Protocol::Tp1, &pattern.nu, horizon), pattern.probability);
    }
    let (mu, sigma) = x.finish(m_mat, m);
    let (mu_s, sigma_s) = s.finish(m_mat, m);
    Ok(ProtocolMoments {
        protocol,
        mu,
        sigma,
        mu_s,
        sigma_s,
    })
}

/// Sampled moments. Works for any channel; Markov patterns start from a
/// network state drawn from the stationary distribution.
pub fn mc_protocol_moments(
    protocol: Protocol,
    channel: &ChannelModel,
    m_mat: &DMatrix<f64>,
    horizon: usize,
    m: usize,
    kappa: usize,
    samples: usize,
    seed: u64,
) -> Result<ProtocolMoments> {
    check_moment_inputs(m_mat, horizon, m, kappa)?;
    if samples == 0 {
        return Err(SmpcError::param("samples", "need at least one sample"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = FactorMoments::new(horizon);
    let mut s = FactorMoments::new(horizon);
    let mut nu = vec![false; kappa];
    for _ in 0..samples {
        let mut sampler = channel.stationary_sampler(&mut rng);
        for v in nu.iter_mut() {
            *v = sampler.next(&mut rng);
        }
        x.add(&selection_factors(protocol, &nu, horizon), 1.0);
        s.add(&selection_factors(Protocol::Tp1, &nu, horizon), 1.0);
    }
    x.normalize(samples as f64);
    s.normalize(samples as f64);
    let (mu, sigma) = x.finish(m_mat, m);
    let (mu_s, sigma_s) = s.finish(m_mat, m);
    Ok(ProtocolMoments {
        protocol,
        mu,
        sigma,
        mu_s,
        sigma_s,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bits(v: &[u8]) -> Vec<bool> {
        v.iter().map(|&b| b == 1).collect()
    }

    #[test]
    fn iid_with_certain_success_never_drops() {
        let ch = ChannelModel::iid(1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(sample_dropouts(&ch, 500, &mut rng).into_iter().all(|v| v));
    }

    #[test]
    fn iid_empirical_rate() {
        let ch = ChannelModel::iid(0.8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let hits = sample_dropouts(&ch, n, &mut rng).into_iter().filter(|v| *v).count();
        let rate = hits as f64 / n as f64;
        assert!((rate - 0.8).abs() < 0.005, "{rate}");
    }

    #[test]
    fn invalid_channels_rejected() {
        assert!(ChannelModel::iid(0.0).is_err());
        assert!(ChannelModel::iid(1.2).is_err());
        let bad_rows = DMatrix::from_row_slice(2, 2, &[0.5, 0.4, 0.9, 0.1]);
        assert!(ChannelModel::markov(vec![0.8, 0.4], bad_rows, 0).is_err());
        let ok = DMatrix::from_row_slice(2, 2, &[0.7, 0.3, 0.9, 0.1]);
        assert!(ChannelModel::markov(vec![0.8, 0.0], ok.clone(), 0).is_err());
        assert!(ChannelModel::markov(vec![0.8, 0.4], ok, 2).is_err());
    }

    #[test]
    fn markov_stationary_rate() {
        let ch = ChannelModel::good_bad_example();
        let ChannelModel::MarkovNetworkState(mc) = &ch else { unreachable!() };
        let pi = mc.stationary_distribution();
        // Balance: π_good · 0.3 = π_bad · 0.9.
        assert!((pi[0] - 0.75).abs() < 1e-12 && (pi[1] - 0.25).abs() < 1e-12);
        let expected = pi[0] * 0.8 + pi[1] * 0.4;
        assert!((ch.mean_success_rate() - expected).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let hits = sample_dropouts(&ch, n, &mut rng).into_iter().filter(|v| *v).count();
        assert!((hits as f64 / n as f64 - expected).abs() < 0.01);
    }

    #[test]
    fn selection_s_cases() {
        assert_eq!(build_selection_s(&bits(&[1, 1]), 3, 2), DMatrix::identity(6, 6));
        let s = build_selection_s(&bits(&[1, 0]), 3, 1);
        assert_eq!(s, DMatrix::from_diagonal(&DVector::from_row_slice(&[1.0, 0.0, 1.0])));
        assert_eq!(build_selection_s(&bits(&[0]), 1, 2), DMatrix::zeros(2, 2));
    }

    #[test]
    fn selection_k_cases() {
        assert_eq!(build_selection_k(&bits(&[1, 0]), 3, 1), DMatrix::identity(3, 3));
        let k = build_selection_k(&bits(&[0, 1]), 3, 2);
        assert_eq!(k, DMatrix::from_diagonal(&DVector::from_row_slice(&[0.0, 0.0, 0.0, 0.0, 1.0, 1.0])));
        assert_eq!(build_selection_k(&bits(&[0, 1]), 2, 1), DMatrix::zeros(2, 2));
    }

    #[test]
    fn selection_g_cases() {
        assert_eq!(build_selection_g(&bits(&[1, 1, 1]), 4, 1), DMatrix::identity(4, 4));
        let g = build_selection_g(&bits(&[0, 1]), 3, 1);
        assert_eq!(g, DMatrix::from_diagonal(&DVector::from_row_slice(&[0.0, 1.0, 1.0])));
        let g = build_selection_g(&bits(&[0, 0]), 3, 1);
        assert_eq!(g, DMatrix::from_diagonal(&DVector::from_row_slice(&[0.0, 0.0, 1.0])));
    }

    #[test]
    fn rho_follows_first_success() {
        assert_eq!(rho_sequence(&bits(&[0, 0, 1, 0, 1])), vec![0.0, 0.0, 1.0, 1.0, 1.0]);
        assert_eq!(rho_sequence(&bits(&[1, 0, 0])), vec![1.0, 1.0, 1.0]);
        assert!(rho_sequence(&[]).is_empty());
    }

    #[test]
    fn patterns_sum_to_one() {
        for kappa in 1..=6 {
            let total: f64 = dropout_patterns(0.37, kappa).map(|p| p.probability).sum();
            assert!((total - 1.0).abs() < 1e-12);
            assert_eq!(dropout_patterns(0.37, kappa).count(), 1 << kappa);
        }
    }

    #[test]
    fn exact_moments_without_dropouts() {
        let m = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.1, 0.5, 1.0, 0.2, 0.1, 0.2, 3.0]);
        for proto in Protocol::ALL {
            let pm = exact_protocol_moments(proto, 1.0, &m, 3, 1, 2).unwrap();
            assert_eq!(pm.mu, DMatrix::identity(3, 3));
            assert!((&pm.sigma - &m).abs().max() < 1e-15);
        }
    }

    #[test]
    fn exact_tp1_second_moment_by_independence() {
        let m = DMatrix::identity(2, 2);
        let pm = exact_protocol_moments(Protocol::Tp1, 0.5, &m, 2, 1, 2).unwrap();
        // Off-diagonal: M_ij = 0 for identity M, so only p on the diagonal.
        assert!((pm.sigma[(0, 0)] - 0.5).abs() < 1e-15);
        let ones = DMatrix::from_element(2, 2, 1.0);
        let pm = exact_protocol_moments(Protocol::Tp1, 0.5, &ones, 2, 1, 2).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[0.5, 0.25, 0.25, 0.5]);
        assert!((pm.sigma - expected).abs().max() < 1e-15);
    }

    #[test]
    fn exact_tp3_mean_of_second_block() {
        let m = DMatrix::identity(2, 2);
        let pm = exact_protocol_moments(Protocol::Tp3, 0.5, &m, 2, 1, 2).unwrap();
        assert!((pm.mu[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((pm.mu[(1, 1)] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn enumeration_limit() {
        let m = DMatrix::identity(25, 25);
        match exact_protocol_moments(Protocol::Tp1, 0.5, &m, 25, 1, 25) {
            Err(SmpcError::EnumerationTooLarge { kappa: 25, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn sampled_moments_match_enumeration() {
        let m = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.1, 0.5, 1.0, 0.2, 0.1, 0.2, 3.0]);
        let ch = ChannelModel::iid(0.8).unwrap();
        for proto in Protocol::ALL {
            let exact = exact_protocol_moments(proto, 0.8, &m, 3, 1, 2).unwrap();
            let mc = mc_protocol_moments(proto, &ch, &m, 3, 1, 2, 200_000, 5).unwrap();
            assert!((exact.mu - mc.mu).abs().max() < 5e-3);
            assert!((exact.sigma - mc.sigma).abs().max() < 5e-3 * 3.0);
        }
    }

    #[test]
    fn markov_sampled_means_between_state_rates() {
        let ch = ChannelModel::good_bad_example();
        let m = DMatrix::identity(4, 4);
        let pm = mc_protocol_moments(Protocol::Tp1, &ch, &m, 4, 1, 3, 100_000, 3).unwrap();
        for i in 0..3 {
            assert!(pm.mu[(i, i)] > 0.4 && pm.mu[(i, i)] < 0.8, "{}", pm.mu[(i, i)]);
        }
        assert_eq!(pm.mu[(3, 3)], 1.0);
    }

    #[test]
    fn protocol_names_round_trip() {
        for p in Protocol::ALL {
            assert_eq!(p.to_string().parse::<Protocol>().unwrap(), p);
        }
        assert_eq!("TP2".parse::<Protocol>().unwrap(), Protocol::Tp2);
        assert!("tp4".parse::<Protocol>().is_err());
    }
}
