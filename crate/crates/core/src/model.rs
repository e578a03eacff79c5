//! Plant description, decomposition checks and reachability objects.
//!
//! The plant `x⁺ = A x + B u + w` is supplied already split into an
//! orthogonal block `A_o` (top-left, `d_o × d_o`) and a Schur-stable block
//! `A_s` (bottom-right). Nothing here computes that similarity transform; the
//! block form is only verified.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, SmpcError};
use crate::linalg;

/// Relative singular-value threshold used for rank decisions.
pub const DEFAULT_RANK_TOLERANCE: f64 = 1e-9;

/// Relative singular-value cutoff used by [`pseudo_inverse`].
pub const PSEUDO_INVERSE_CUTOFF: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    u_max: f64,
    d_o: usize,
}

impl LinearSystem {
    /// Builds a plant from its block-form matrices. Only shapes and the input
    /// bound are checked here; see [`verify_decomposition`] for the structure.
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, u_max: f64, d_o: usize) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(SmpcError::dim("A (must be square)", format!("{0}x{0}", a.nrows()), format!("{}x{}", a.nrows(), a.ncols())));
        }
        if b.nrows() != a.nrows() {
            return Err(SmpcError::dim("B rows vs state dimension d", a.nrows(), b.nrows()));
        }
        if b.ncols() == 0 {
            return Err(SmpcError::dim("B columns (input dimension m)", ">= 1", 0));
        }
        if d_o > a.nrows() {
            return Err(SmpcError::dim("orthogonal block size d_o", format!("<= {}", a.nrows()), d_o));
        }
        if !(u_max > 0.0 && u_max.is_finite()) {
            return Err(SmpcError::param("u_max", format!("must be positive and finite, got {u_max}")));
        }
        Ok(Self { a, b, u_max, d_o })
    }

    /// The three-state orthogonal plant with scalar input used throughout the
    /// experiments (`|u| ≤ 15`).
    pub fn three_state_example() -> Self {
        let a = DMatrix::from_row_slice(
            3,
            3,
            &[0.0, -0.80, -0.60, 0.80, -0.36, 0.48, 0.60, 0.48, -0.64],
        );
        let b = DMatrix::from_row_slice(3, 1, &[0.16, 0.12, 0.14]);
        Self::new(a, b, 15.0, 3).expect("example plant is well formed")
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn u_max(&self) -> f64 {
        self.u_max
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn orthogonal_dim(&self) -> usize {
        self.d_o
    }

    pub fn schur_dim(&self) -> usize {
        self.a.nrows() - self.d_o
    }

    pub fn a_o(&self) -> DMatrix<f64> {
        self.a.view((0, 0), (self.d_o, self.d_o)).into_owned()
    }

    pub fn b_o(&self) -> DMatrix<f64> {
        self.b.view((0, 0), (self.d_o, self.input_dim())).into_owned()
    }

    pub fn a_s(&self) -> DMatrix<f64> {
        let ds = self.schur_dim();
        self.a.view((self.d_o, self.d_o), (ds, ds)).into_owned()
    }

    /// One plant step `A x + B u + w`.
    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u + w
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecompositionTolerance {
    /// Bound on `‖A_oᵀA_o − I‖_∞` and on the off-diagonal coupling blocks.
    pub orthogonality: f64,
    /// Required margin `1 − ρ(A_s)`.
    pub stability_margin: f64,
}

impl Default for DecompositionTolerance {
    fn default() -> Self {
        Self {
            orthogonality: 1e-9,
            stability_margin: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecompositionReport {
    /// Induced ∞-norm of `A_oᵀA_o − I`.
    pub orthogonality_residual: f64,
    /// Largest entry of the off-diagonal blocks coupling the two subsystems.
    pub coupling_residual: f64,
    /// Spectral radius of `A_s` (0 when `d_s = 0`).
    pub schur_spectral_radius: f64,
    pub lyapunov_stable: bool,
}

impl DecompositionReport {
    pub fn passed(&self) -> bool {
        self.lyapunov_stable
    }
}

pub fn verify_decomposition(sys: &LinearSystem) -> DecompositionReport {
    verify_decomposition_with(sys, DecompositionTolerance::default())
}

pub fn verify_decomposition_with(sys: &LinearSystem, tol: DecompositionTolerance) -> DecompositionReport {
    let d_o = sys.orthogonal_dim();
    let d_s = sys.schur_dim();

    let a_o = sys.a_o();
    let gram = a_o.transpose() * &a_o - DMatrix::<f64>::identity(d_o, d_o);
    let orthogonality_residual = (0..d_o)
        .map(|i| gram.row(i).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0_f64, f64::max);

    let upper = sys.a().view((0, d_o), (d_o, d_s)).into_owned();
    let lower = sys.a().view((d_o, 0), (d_s, d_o)).into_owned();
    let coupling_residual = linalg::max_abs(&upper).max(linalg::max_abs(&lower));

    let schur_spectral_radius = if d_s == 0 {
        0.0
    } else {
        sys.a_s()
            .complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .fold(0.0_f64, f64::max)
    };

    let lyapunov_stable = orthogonality_residual <= tol.orthogonality
        && coupling_residual <= tol.orthogonality
        && schur_spectral_radius < 1.0 - tol.stability_margin;

    DecompositionReport {
        orthogonality_residual,
        coupling_residual,
        schur_spectral_radius,
        lyapunov_stable,
    }
}

/// Zero-mean Gaussian process noise with a fixed per-step covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    covariance: DMatrix<f64>,
    factor: DMatrix<f64>,
}

impl NoiseModel {
    pub fn gaussian(covariance: DMatrix<f64>) -> Result<Self> {
        if covariance.nrows() != covariance.ncols() {
            return Err(SmpcError::dim(
                "noise covariance (must be square)",
                format!("{0}x{0}", covariance.nrows()),
                format!("{}x{}", covariance.nrows(), covariance.ncols()),
            ));
        }
        let scale = linalg::max_abs(&covariance).max(1.0);
        if linalg::asymmetry(&covariance) > 1e-12 * scale {
            return Err(SmpcError::param("noise covariance", "not symmetric"));
        }
        let min_eig = linalg::min_symmetric_eigenvalue(&covariance);
        if min_eig < -1e-12 * scale {
            return Err(SmpcError::param("noise covariance", format!("not PSD (min eigenvalue {min_eig:e})")));
        }
        let factor = linalg::psd_factor(&covariance);
        Ok(Self { covariance, factor })
    }

    /// Isotropic noise `variance · I_d`.
    pub fn isotropic(d: usize, variance: f64) -> Result<Self> {
        Self::gaussian(DMatrix::identity(d, d) * variance)
    }

    pub fn dim(&self) -> usize {
        self.covariance.nrows()
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.factor * z
    }

    /// Writes one sample into `out` using `scratch` for the standard normals.
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, scratch: &mut [f64], out: &mut [f64]) {
        let d = self.dim();
        for z in scratch.iter_mut().take(d) {
            *z = rng.sample(StandardNormal);
        }
        for (i, o) in out.iter_mut().enumerate().take(d) {
            let mut acc = 0.0;
            for (j, z) in scratch.iter().enumerate().take(d) {
                acc += self.factor[(i, j)] * z;
            }
            *o = acc;
        }
    }
}

/// `[A^{k−1}M | A^{k−2}M | … | M]`.
pub fn reachability_matrix(a_o: &DMatrix<f64>, m: &DMatrix<f64>, k: usize) -> Result<DMatrix<f64>> {
    if k == 0 {
        return Err(SmpcError::param("k", "reachability matrix needs at least one step"));
    }
    if a_o.nrows() != a_o.ncols() {
        return Err(SmpcError::dim("A_o (must be square)", format!("{0}x{0}", a_o.nrows()), format!("{}x{}", a_o.nrows(), a_o.ncols())));
    }
    if m.nrows() != a_o.nrows() {
        return Err(SmpcError::dim("M rows vs A_o", a_o.nrows(), m.nrows()));
    }
    let cols = m.ncols();
    let mut out = DMatrix::zeros(a_o.nrows(), k * cols);
    // Fill right to left: block k−1 is M, block k−2 is A M, ...
    let mut block = m.clone();
    for j in (0..k).rev() {
        out.view_mut((0, j * cols), (a_o.nrows(), cols)).copy_from(&block);
        block = a_o * &block;
    }
    Ok(out)
}

/// Numerical rank with singular values above `rel_tol · σ_max`.
pub fn rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.clone().singular_values();
    let smax = sv.iter().cloned().fold(0.0_f64, f64::max);
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|s| **s > rel_tol * smax).count()
}

/// Smallest `k` such that the `k`-step reachability matrix has full row rank.
pub fn reachability_index(a_o: &DMatrix<f64>, b_o: &DMatrix<f64>) -> Result<usize> {
    reachability_index_with(a_o, b_o, DEFAULT_RANK_TOLERANCE)
}

pub fn reachability_index_with(a_o: &DMatrix<f64>, b_o: &DMatrix<f64>, rel_tol: f64) -> Result<usize> {
    let d_o = a_o.nrows();
    if d_o == 0 {
        return Ok(1);
    }
    for k in 1..=d_o {
        if rank(&reachability_matrix(a_o, b_o, k)?, rel_tol) == d_o {
            return Ok(k);
        }
    }
    Err(SmpcError::NotReachable { steps: d_o })
}

/// Moore–Penrose pseudo-inverse through the SVD, dropping singular values at
/// or below `1e-12 · σ_max`.
pub fn pseudo_inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (r, c) = m.shape();
    if r == 0 || c == 0 {
        return DMatrix::zeros(c, r);
    }
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested Vᵀ");
    let smax = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    let mut out = DMatrix::zeros(c, r);
    if smax == 0.0 {
        return out;
    }
    let mut recomposed = DMatrix::zeros(r, c);
    for (k, &s) in svd.singular_values.iter().enumerate() {
        let vk = v_t.row(k).transpose();
        let uk = u.column(k);
        recomposed += (uk * vk.transpose()) * s;
        if s <= PSEUDO_INVERSE_CUTOFF * smax {
            continue;
        }
        out += (vk * uk.transpose()) / s;
    }
    // The SVD routine occasionally returns factors that do not reproduce a
    // rank-deficient input.
    if (recomposed - m).amax() > SVD_CHECK_TOLERANCE * smax {
        log::debug!("SVD factors inconsistent; using the Gram-matrix pseudo-inverse");
        return gram_pseudo_inverse(m, smax);
    }
    out
}

const SVD_CHECK_TOLERANCE: f64 = 1e-10;

/// Relative singular-value cutoff for the Gram fallback, which cannot resolve
/// values much below `√ε · σ_max`.
const GRAM_CUTOFF: f64 = 1e-7;

/// `m⁺ = (mᵀm)⁺ mᵀ` with `(mᵀm)⁺` from its symmetric eigendecomposition.
fn gram_pseudo_inverse(m: &DMatrix<f64>, smax: f64) -> DMatrix<f64> {
    let eig = (m.transpose() * m).symmetric_eigen();
    let cutoff = (GRAM_CUTOFF * smax).powi(2);
    let mut g_pinv = DMatrix::zeros(m.ncols(), m.ncols());
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam > cutoff {
            let v = eig.eigenvectors.column(k);
            g_pinv += (v * v.transpose()) / lam;
        }
    }
    g_pinv * m.transpose()
}

/// Reachability index of `(A_o, B_o)` together with `R_κ` and its
/// pseudo-inverse.
#[derive(Debug, Clone, PartialEq)]
pub struct ReachabilityData {
    pub kappa: usize,
    pub r_kappa: DMatrix<f64>,
    pub r_kappa_pinv: DMatrix<f64>,
}

impl ReachabilityData {
    pub fn new(sys: &LinearSystem) -> Result<Self> {
        let a_o = sys.a_o();
        let b_o = sys.b_o();
        let kappa = reachability_index(&a_o, &b_o)?;
        let r_kappa = reachability_matrix(&a_o, &b_o, kappa)?;
        let r_kappa_pinv = pseudo_inverse(&r_kappa);
        Ok(Self {
            kappa,
            r_kappa,
            r_kappa_pinv,
        })
    }

    /// Largest singular value of `R_κ⁺`.
    pub fn pinv_norm(&self) -> f64 {
        if self.r_kappa_pinv.is_empty() {
            return 0.0;
        }
        self.r_kappa_pinv
            .clone()
            .singular_values()
            .iter()
            .cloned()
            .fold(0.0_f64, f64::max)
    }

    /// Supremum of the admissible drift amount, `U_max / (√d_o σ₁(R_κ⁺))`.
    /// The interval for ζ is open at both ends.
    pub fn zeta_upper_limit(&self, sys: &LinearSystem) -> f64 {
        let d_o = sys.orthogonal_dim() as f64;
        let s = self.pinv_norm();
        if s == 0.0 || d_o == 0.0 {
            return f64::INFINITY;
        }
        sys.u_max() / (d_o.sqrt() * s)
    }
}
