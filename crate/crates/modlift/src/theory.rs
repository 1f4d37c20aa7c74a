//! Quantitative support-recovery theory: bound calculators, the primal-dual
//! witness certificate, the restricted-isometry diagnostic, and Monte-Carlo
//! validation of the quadratic Gaussian tail bounds.
//!
//! The guarantee constants (`C_{alpha,1}`, `C_{alpha,2}`, `C_alpha`) are
//! never pinned down numerically by the theory; they default to 1 here and
//! are user-configurable, so the calculators predict scaling shapes rather
//! than absolute thresholds.

use num_complex::Complex64;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::lifted_op::{assemble_blocks, CMat, CVec, MatrixFreeOp, SupportRestricted};
use crate::solver::{solve_group_lasso, SolverOptions};

/// Minimum Gram eigenvalue below which the support Gram counts as singular.
pub const GRAM_INVERTIBLE_TOL: f64 = 1e-10;

/// Inputs to the bound calculators. Dimensions are conceptually positive
/// integers but stored as reals so constructed unit cases (e.g. `N = e`)
/// can be evaluated.
#[derive(Debug, Clone)]
pub struct BoundInputs {
    pub n: f64,
    pub m: f64,
    pub k: f64,
    pub j: f64,
    /// Noise std per real/imaginary component.
    pub sigma: f64,
    /// Basis coherence, in `[1, sqrt(N)]`.
    pub mu_max: f64,
    /// Tail exponent; must exceed 1.
    pub alpha: f64,
    pub c_alpha_1: f64,
    pub c_alpha_2: f64,
    pub c_alpha_err: f64,
}

impl BoundInputs {
    pub fn new(n: f64, m: f64, k: f64, j: f64, sigma: f64, mu_max: f64) -> Result<Self> {
        let b = BoundInputs {
            n,
            m,
            k,
            j,
            sigma,
            mu_max,
            alpha: 2.0,
            c_alpha_1: 1.0,
            c_alpha_2: 1.0,
            c_alpha_err: 1.0,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn with_constants(mut self, c1: f64, c2: f64, c_err: f64) -> Result<Self> {
        self.c_alpha_1 = c1;
        self.c_alpha_2 = c2;
        self.c_alpha_err = c_err;
        self.validate()?;
        Ok(self)
    }

    pub fn with_alpha(mut self, alpha: f64) -> Result<Self> {
        self.alpha = alpha;
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        if !(self.n >= 1.0 && self.m >= 1.0 && self.k >= 1.0 && self.j >= 1.0) {
            return Err(Error::param("dimensions must be at least 1"));
        }
        if self.j >= self.m {
            return Err(Error::param("sparsity J must be below M"));
        }
        if self.m - self.j < 1.0 {
            return Err(Error::param("M - J must be at least 1 (log domain)"));
        }
        if self.k >= self.n {
            return Err(Error::param("subspace dimension K must be below N"));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::param("sigma must be nonnegative"));
        }
        if !(self.mu_max >= 1.0 - 1e-9 && self.mu_max <= self.n.sqrt() + 1e-9) {
            return Err(Error::param(format!(
                "coherence {} outside [1, sqrt(N)]",
                self.mu_max
            )));
        }
        if !(self.alpha > 1.0) {
            return Err(Error::param("alpha must exceed 1"));
        }
        if !(self.c_alpha_1 > 0.0 && self.c_alpha_2 > 0.0 && self.c_alpha_err > 0.0) {
            return Err(Error::param("constants must be positive"));
        }
        Ok(())
    }
}

/// Regularization lower bound
/// `sqrt(C_{alpha,2} sigma^2 mu^2 K [log(M-J) + log N])` (natural logs).
pub fn lambda_lower_bound(b: &BoundInputs) -> Result<f64> {
    b.validate()?;
    let logs = (b.m - b.j).ln() + b.n.ln();
    Ok((b.c_alpha_2 * b.sigma * b.sigma * b.mu_max * b.mu_max * b.k * logs).sqrt())
}

/// Sufficient observation count
/// `C_{alpha,1} mu^2 J K [log(M-J) + log^2 N]`.
pub fn sample_complexity_bound(b: &BoundInputs) -> Result<f64> {
    b.validate()?;
    let ln_n = b.n.ln();
    let logs = (b.m - b.j).ln() + ln_n * ln_n;
    Ok(b.c_alpha_1 * b.mu_max * b.mu_max * b.j * b.k * logs)
}

/// Recovery error bound
/// `sqrt(C_alpha sigma^2 mu^2 J K [log J + log N]) + 4 sqrt(J) lambda`;
/// also the exact-recovery threshold on the smallest ground-truth column norm.
pub fn error_bound(b: &BoundInputs, lambda: f64) -> Result<f64> {
    b.validate()?;
    if !(lambda >= 0.0) {
        return Err(Error::param("lambda must be nonnegative"));
    }
    let logs = b.j.ln() + b.n.ln();
    let noise_term =
        (b.c_alpha_err * b.sigma * b.sigma * b.mu_max * b.mu_max * b.j * b.k * logs).sqrt();
    Ok(noise_term + 4.0 * b.j.sqrt() * lambda)
}

/// The simulation scale `gamma_0 = sqrt(sigma^2 mu^2 K [log(M-J) + log N])`,
/// i.e. [`lambda_lower_bound`] with its constant fixed to 1.
pub fn gamma_zero(b: &BoundInputs) -> Result<f64> {
    let mut unit = b.clone();
    unit.c_alpha_2 = 1.0;
    lambda_lower_bound(&unit)
}

/// Eigendecomposition-backed helpers for the (Hermitian PSD) support Gram.
struct GramEigen {
    vectors: CMat,
    values: Vec<f64>,
}

impl GramEigen {
    fn new(gram: &CMat) -> Self {
        let eig = gram.clone().symmetric_eigen();
        GramEigen {
            vectors: eig.eigenvectors,
            values: eig.eigenvalues.iter().cloned().collect(),
        }
    }

    fn min_eig(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Spectral norm of `G - I`.
    fn isometry_residual(&self) -> f64 {
        self.values
            .iter()
            .map(|v| (v - 1.0).abs())
            .fold(0.0f64, f64::max)
    }

    fn solve(&self, rhs: &CVec) -> CVec {
        let proj = self.vectors.adjoint() * rhs;
        let scaled = CVec::from_fn(proj.len(), |i, _| proj[i] / self.values[i]);
        &self.vectors * scaled
    }
}

/// Spectral norm of `Phi_T^H Phi_T - I` on the densely assembled support
/// Gram; 0 by convention for an empty support.
pub fn isometry_residual(op: &(impl MatrixFreeOp + ?Sized), support: &[usize]) -> Result<f64> {
    if support.is_empty() {
        return Ok(0.0);
    }
    let phi_t = assemble_blocks(op, support)?;
    let gram = phi_t.adjoint() * &phi_t;
    Ok(GramEigen::new(&gram).isometry_residual())
}

/// The primal-dual witness quantities for a support, ground truth, noise
/// realization, and regularization level.
#[derive(Debug, Clone)]
pub struct WitnessReport {
    pub gram_min_eig: f64,
    pub gram_invertible: bool,
    /// `||Phi_T^H Phi_T - I||`.
    pub isometry_residual: f64,
    /// Subgradient on the support from the restricted solve (length `JK`).
    pub s_t: CVec,
    /// Off-support dual block norms in ascending column order (length `M-J`).
    pub s_tc_block_norms: Vec<f64>,
    /// Off-support dual blocks (`K x (M-J)`), ascending column order.
    pub s_tc_blocks: CMat,
    pub certified: bool,
    /// `vec(X_hat_T) - vec(X0_T)` predicted by the Gram-inverse formula.
    pub delta_x: CVec,
    /// Max per-entry deviation between the projector-form and residual-form
    /// computations of the off-support dual blocks.
    pub route_consistency: f64,
    /// Diagnostic `||Phi_T^H n||_{2,inf}`.
    pub phi_t_noise_l2inf: f64,
}

/// Runs the witness construction: solves the support-restricted problem,
/// forms the on-support subgradient, and propagates it to the off-support
/// dual blocks whose norms decide certification.
pub fn witness_certificate(
    op: &(impl MatrixFreeOp + ?Sized),
    support: &[usize],
    x0_t: &CMat,
    noise: &CVec,
    lambda: f64,
) -> Result<WitnessReport> {
    if !(lambda > 0.0) {
        return Err(Error::param("lambda must be positive"));
    }
    let (k_dim, m) = op.coeff_dims();
    let j = support.len();
    if j == 0 {
        return Err(Error::param("support must be nonempty"));
    }
    let restricted = SupportRestricted::new(op, support)?;
    if x0_t.nrows() != k_dim || x0_t.ncols() != j {
        return Err(Error::shape(format!(
            "restricted ground truth must be {k_dim} x {j}, got {} x {}",
            x0_t.nrows(),
            x0_t.ncols()
        )));
    }
    if noise.len() != op.obs_len() {
        return Err(Error::shape("noise length must match observation length"));
    }

    let phi_t = assemble_blocks(op, restricted.support())?;
    let gram = phi_t.adjoint() * &phi_t;
    let eigen = GramEigen::new(&gram);
    let gram_min_eig = eigen.min_eig();
    let iso = eigen.isometry_residual();
    let gram_invertible = gram_min_eig >= GRAM_INVERTIBLE_TOL;
    let tc: Vec<usize> = (0..m).filter(|idx| !support.contains(idx)).collect();

    if !gram_invertible {
        return Ok(WitnessReport {
            gram_min_eig,
            gram_invertible: false,
            isometry_residual: iso,
            s_t: CVec::zeros(0),
            s_tc_block_norms: Vec::new(),
            s_tc_blocks: CMat::zeros(k_dim, 0),
            certified: false,
            delta_x: CVec::zeros(0),
            route_consistency: 0.0,
            phi_t_noise_l2inf: 0.0,
        });
    }

    // Step 1: solve the support-restricted problem.
    let y = op.forward(&restricted.embed(x0_t))? + noise;
    let opts = SolverOptions {
        kkt_tol: 1e-9,
        max_iters: 50_000,
        ..Default::default()
    };
    let restricted_sol = solve_group_lasso(&restricted, &y, lambda, &opts)?;
    let x_hat_t = restricted_sol.estimate;

    // Step 2: on-support subgradient. Active blocks take x/||x||; zero blocks
    // take the value implied by the restricted first-order condition.
    let vec_xt = CVec::from_column_slice(x_hat_t.as_slice());
    let residual = &y - &phi_t * &vec_xt;
    let mut s_t = CVec::zeros(j * k_dim);
    let max_block = (0..j).map(|c| x_hat_t.column(c).norm()).fold(0.0, f64::max);
    for c in 0..j {
        let norm = x_hat_t.column(c).norm();
        if norm > crate::solver::ACTIVE_BLOCK_REL_FLOOR * max_block && norm > 0.0 {
            for r in 0..k_dim {
                s_t[c * k_dim + r] = x_hat_t[(r, c)] / Complex64::new(norm, 0.0);
            }
        } else {
            let block = phi_t.columns(c * k_dim, k_dim).adjoint() * &residual;
            for r in 0..k_dim {
                s_t[c * k_dim + r] = block[r] / Complex64::new(lambda, 0.0);
            }
        }
    }

    // Gram-inverse formula for the on-support deviation.
    let phi_t_noise = phi_t.adjoint() * noise;
    let delta_rhs = &phi_t_noise - &s_t * Complex64::new(lambda, 0.0);
    let delta_x = eigen.solve(&delta_rhs);

    let phi_t_noise_l2inf = (0..j)
        .map(|c| phi_t_noise.rows(c * k_dim, k_dim).norm())
        .fold(0.0f64, f64::max);

    // Step 3, projector route: s_TC = Phi_TC^H (I - Phi_T G^-1 Phi_T^H)(n/lambda)
    //                                 + Phi_TC^H Phi_T G^-1 s_T.
    let inv_lambda = Complex64::new(1.0 / lambda, 0.0);
    let n_scaled = noise * inv_lambda;
    let projected = &n_scaled - &phi_t * eigen.solve(&(phi_t.adjoint() * &n_scaled));
    let transfer = &phi_t * eigen.solve(&s_t);
    let dual_field = op.adjoint(&(projected + transfer))?;

    // Residual route: s_TC = (1/lambda)(Phi_TC^H n - Phi_TC^H Phi_T delta_x).
    let shifted = (noise - &phi_t * &delta_x) * inv_lambda;
    let dual_field_alt = op.adjoint(&shifted)?;

    let mut s_tc_blocks = CMat::zeros(k_dim, tc.len());
    let mut s_tc_block_norms = Vec::with_capacity(tc.len());
    let mut route_consistency = 0.0f64;
    for (slot, &idx) in tc.iter().enumerate() {
        s_tc_blocks.set_column(slot, &dual_field.column(idx));
        s_tc_block_norms.push(dual_field.column(idx).norm());
        for r in 0..k_dim {
            route_consistency = route_consistency
                .max((dual_field[(r, idx)] - dual_field_alt[(r, idx)]).norm());
        }
    }
    let max_norm = s_tc_block_norms.iter().cloned().fold(0.0f64, f64::max);
    let certified = max_norm < 1.0;

    Ok(WitnessReport {
        gram_min_eig,
        gram_invertible,
        isometry_residual: iso,
        s_t,
        s_tc_block_norms,
        s_tc_blocks,
        certified,
        delta_x,
        route_consistency,
        phi_t_noise_l2inf,
    })
}

/// Outcome of the quadratic-Gaussian tail-bound Monte Carlo.
#[derive(Debug, Clone, Copy)]
pub struct TailCheck {
    /// Fraction of trials with `||H a||^2` above the threshold.
    pub empirical_rate: f64,
    /// The guaranteed ceiling `e^{-alpha}`.
    pub bound: f64,
    /// The exceedance threshold used.
    pub threshold: f64,
}

/// Draws a fixed `K x N` complex `H`, then samples noise vectors and counts
/// how often `||H a||^2` exceeds the simplified tail threshold
/// (`sigma^2 [2 + (2 sqrt 2 + 2) alpha] Tr(Sigma)` for complex noise,
/// `sigma^2 (1 + 4 alpha) Tr(Sigma)` for real noise).
pub fn tail_bound_check(
    k: usize,
    n: usize,
    sigma: f64,
    alpha: f64,
    trials: usize,
    complex_input: bool,
    rng_seed: u64,
) -> Result<TailCheck> {
    if k == 0 || n == 0 {
        return Err(Error::param("dimensions must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let h = CMat::from_fn(k, n, |_, _| {
        Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))
    });
    tail_bound_check_with(&h, sigma, alpha, trials, complex_input, &mut rng)
}

/// Same as [`tail_bound_check`] but with an explicit matrix `H`.
pub fn tail_bound_check_with(
    h: &CMat,
    sigma: f64,
    alpha: f64,
    trials: usize,
    complex_input: bool,
    rng: &mut ChaCha8Rng,
) -> Result<TailCheck> {
    if !(alpha > 1.0) {
        return Err(Error::param("alpha must exceed 1"));
    }
    if !(sigma > 0.0) {
        return Err(Error::param("sigma must be positive"));
    }
    if trials < 1000 {
        return Err(Error::param("at least 1000 trials required"));
    }
    let trace_sigma = h.norm_squared(); // Tr(H^H H) = ||H||_F^2
    let threshold = if complex_input {
        sigma * sigma * (2.0 + (2.0 * std::f64::consts::SQRT_2 + 2.0) * alpha) * trace_sigma
    } else {
        sigma * sigma * (1.0 + 4.0 * alpha) * trace_sigma
    };

    let normal = Normal::new(0.0, sigma).map_err(|e| Error::param(format!("sigma: {e}")))?;
    let n = h.ncols();
    let mut exceed = 0usize;
    let mut a = CVec::zeros(n);
    for _ in 0..trials {
        for i in 0..n {
            let re: f64 = rng.sample(normal);
            let im: f64 = if complex_input { rng.sample(normal) } else { 0.0 };
            a[i] = Complex64::new(re, im);
        }
        let ha = h * &a;
        if ha.norm_squared() > threshold {
            exceed += 1;
        }
    }
    Ok(TailCheck {
        empirical_rate: exceed as f64 / trials as f64,
        bound: (-alpha).exp(),
        threshold,
    })
}

/// Convenience: `1/(1 - delta)` bound on the Gram inverse norm implied by an
/// isometry residual `delta < 1`, paired with the measured minimum eigenvalue.
pub fn gram_conditioning(op: &(impl MatrixFreeOp + ?Sized), support: &[usize]) -> Result<(f64, f64, f64)> {
    let phi_t = assemble_blocks(op, support)?;
    let gram = phi_t.adjoint() * &phi_t;
    let eigen = GramEigen::new(&gram);
    let max_inv = eigen
        .values
        .iter()
        .map(|v| 1.0 / v.abs().max(f64::MIN_POSITIVE))
        .fold(0.0f64, f64::max);
    Ok((eigen.isometry_residual(), eigen.min_eig(), max_inv))
}
