//! Executable validators for the linear convergence theory: the steady-state
//! covariance equation, the regularized minimizer, the algebraic law of the
//! unregularized filter, and the covariance divergence bound.
//!
//! Each operation is an oracle against which the engines are checked, so the
//! implementations here deliberately take an independent route (fixed-point
//! iteration and closed-form solves rather than the filter recursion).

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::engines::{kalman_step, HyperParams};
use crate::gaussian::{cholesky_psd, symmetrized, GaussianError, GaussianState};

#[derive(Debug, Error)]
pub enum TheoryError {
    #[error("fixed-point iteration did not converge within {iterations} iterations (hypotheses violated?)")]
    NoConvergence { iterations: usize },
    #[error("normal-equation matrix is singular")]
    SingularNormalEquations,
    #[error(transparent)]
    Gaussian(#[from] GaussianError),
    #[error("kalman step failed: {0}")]
    Engine(String),
}

/// Linear inverse problem `y = G theta + nu` embedded in the stochastic
/// dynamics with parameters `(alpha, r0, Sigma_omega, Sigma_nu)`.
#[derive(Debug, Clone)]
pub struct LinearProblemSpec {
    pub g: DMatrix<f64>,
    pub y: DVector<f64>,
    pub sigma_nu: DMatrix<f64>,
    pub sigma_omega: DMatrix<f64>,
    pub alpha: f64,
    pub r0: DVector<f64>,
}

impl LinearProblemSpec {
    pub fn n_theta(&self) -> usize {
        self.g.ncols()
    }

    /// Residual of the steady-state equation
    /// `C^-1 - G^T Sigma_nu^-1 G - (alpha^2 C + Sigma_omega)^-1` in Frobenius
    /// norm.
    pub fn steady_residual(&self, c_inf: &DMatrix<f64>) -> Result<f64, TheoryError> {
        let m = self.information_matrix()?;
        let c_inv = cholesky_psd(c_inf)?.inverse();
        let pred = symmetrized(c_inf * (self.alpha * self.alpha) + &self.sigma_omega);
        let pred_inv = cholesky_psd(&pred)?.inverse();
        Ok((c_inv - m - pred_inv).norm())
    }

    /// `G^T Sigma_nu^-1 G`, assembled as `Z^T Z` through the Cholesky factor
    /// of `Sigma_nu`.
    pub fn information_matrix(&self) -> Result<DMatrix<f64>, TheoryError> {
        let chol = cholesky_psd(&self.sigma_nu)?;
        let z = chol.solve_lower(&self.g);
        Ok(z.transpose() * z)
    }

    fn weighted_gty(&self) -> Result<DVector<f64>, TheoryError> {
        let chol = cholesky_psd(&self.sigma_nu)?;
        Ok(self.g.transpose() * chol.solve_vec(&self.y))
    }

    fn hyper_params(&self) -> HyperParams {
        HyperParams {
            alpha: self.alpha,
            r0: self.r0.clone(),
            gamma: 1.0,
            sigma_omega: self.sigma_omega.clone(),
            sigma_nu: self.sigma_nu.clone(),
            spread_a: 1.0,
        }
    }
}

/// Steady state of the filtering recursion (exists for alpha < 1, or for
/// alpha = 1 when G has full column rank).
#[derive(Debug, Clone)]
pub struct SteadyState {
    pub c_inf: DMatrix<f64>,
    /// `alpha^2 C_inf + Sigma_omega`, the implied prior covariance.
    pub c_hat_inf: DMatrix<f64>,
    pub m_inf: DVector<f64>,
    pub iterations_to_converge: usize,
}

const FIXED_POINT_TOL: f64 = 1e-13;
const FIXED_POINT_MAX_ITERS: usize = 100_000;

/// Brute-force fixed point of the precision recursion
/// `C_{n+1}^-1 = G^T Sigma_nu^-1 G + (alpha^2 C_n + Sigma_omega)^-1`,
/// iterated from `C_0 = I` until the Frobenius change drops below 1e-13.
pub fn solve_steady_covariance(
    spec: &LinearProblemSpec,
) -> Result<(DMatrix<f64>, usize), TheoryError> {
    let n = spec.n_theta();
    let info = spec.information_matrix()?;
    let mut c = DMatrix::identity(n, n);
    for it in 1..=FIXED_POINT_MAX_ITERS {
        let pred = symmetrized(&c * (spec.alpha * spec.alpha) + &spec.sigma_omega);
        let pred_inv = cholesky_psd(&pred)?.inverse();
        let precision = symmetrized(&info + pred_inv);
        let next = symmetrized(cholesky_psd(&precision)?.inverse());
        let delta = (&next - &c).norm();
        c = next;
        if delta < FIXED_POINT_TOL {
            return Ok((c, it));
        }
    }
    Err(TheoryError::NoConvergence {
        iterations: FIXED_POINT_MAX_ITERS,
    })
}

/// Closed-form minimizer of the regularized functional
/// `Phi_R(theta) = 0.5 ||Sigma_nu^-1/2 (y - G theta)||^2
///              + (1-alpha)/2 ||C_hat_inf^-1/2 (theta - r0)||^2`.
pub fn minimize_phi_r(
    spec: &LinearProblemSpec,
    c_hat_inf: &DMatrix<f64>,
) -> Result<DVector<f64>, TheoryError> {
    let info = spec.information_matrix()?;
    let reg = 1.0 - spec.alpha;
    let c_hat_inv = cholesky_psd(c_hat_inf)?.inverse();
    let a = symmetrized(&info + &c_hat_inv * reg);
    let b = spec.weighted_gty()? + &c_hat_inv * &spec.r0 * reg;
    // plain factorization here: a singular matrix must surface as an error,
    // not get smoothed over by jitter
    let chol = nalgebra::Cholesky::new(a).ok_or(TheoryError::SingularNormalEquations)?;
    Ok(chol.solve(&b))
}

/// Full steady state: covariance fixed point plus the limiting mean.
pub fn solve_steady_state(spec: &LinearProblemSpec) -> Result<SteadyState, TheoryError> {
    let (c_inf, iterations_to_converge) = solve_steady_covariance(spec)?;
    let c_hat_inf = symmetrized(&c_inf * (spec.alpha * spec.alpha) + &spec.sigma_omega);
    let m_inf = minimize_phi_r(spec, &c_hat_inf)?;
    Ok(SteadyState {
        c_inf,
        c_hat_inf,
        m_inf,
        iterations_to_converge,
    })
}

/// `Phi_R` evaluated directly from its definition.
pub fn phi_r(
    spec: &LinearProblemSpec,
    c_hat_inf: &DMatrix<f64>,
    theta: &DVector<f64>,
) -> Result<f64, TheoryError> {
    let chol_nu = cholesky_psd(&spec.sigma_nu)?;
    let misfit = chol_nu.solve_lower_vec(&(&spec.y - &spec.g * theta));
    let chol_hat = cholesky_psd(c_hat_inf)?;
    let reg = chol_hat.solve_lower_vec(&(theta - &spec.r0));
    Ok(0.5 * misfit.norm_squared() + 0.5 * (1.0 - spec.alpha) * reg.norm_squared())
}

/// Central finite-difference gradient of `Phi_R` (step `1e-6 (1 + |theta_i|)`).
pub fn phi_r_gradient_fd(
    spec: &LinearProblemSpec,
    c_hat_inf: &DMatrix<f64>,
    theta: &DVector<f64>,
) -> Result<DVector<f64>, TheoryError> {
    let n = theta.len();
    let mut grad = DVector::zeros(n);
    for i in 0..n {
        let h = 1e-6 * (1.0 + theta[i].abs());
        let mut hi = theta.clone();
        let mut lo = theta.clone();
        hi[i] += h;
        lo[i] -= h;
        grad[i] = (phi_r(spec, c_hat_inf, &hi)? - phi_r(spec, c_hat_inf, &lo)?) / (2.0 * h);
    }
    Ok(grad)
}

/// Symmetric square root through the eigendecomposition.
fn sqrt_spd(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>), TheoryError> {
    let eig = symmetrized(m.clone()).symmetric_eigen();
    if eig.eigenvalues.iter().any(|&l| l <= 0.0) {
        return Err(TheoryError::SingularNormalEquations);
    }
    let sqrt_d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.sqrt()));
    let inv_sqrt_d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()));
    let root = &eig.eigenvectors * sqrt_d * eig.eigenvectors.transpose();
    let inv_root = &eig.eigenvectors * inv_sqrt_d * eig.eigenvectors.transpose();
    Ok((root, inv_root))
}

/// Per-step residuals of the algebraic law of the unregularized filter.
#[derive(Debug, Clone, Copy)]
pub struct LawResidual {
    pub n: usize,
    /// `||(C_n')^-1 - I - nS||_F` in the whitened variables.
    pub precision_residual: f64,
    /// `||(I + nS) m_n' - m_0' - n G'^T Sigma_nu^-1 y||_2`.
    pub mean_residual: f64,
    /// `||P (C_n')^-1 / n - S||_F`: observed-subspace collapse rate.
    pub collapse_error: f64,
}

#[derive(Debug, Clone)]
pub struct AlgebraicLawReport {
    pub residuals: Vec<LawResidual>,
    pub max_precision_residual: f64,
    pub max_mean_residual: f64,
}

/// Runs the exact filter with `alpha = 1`, `Sigma_omega = 0` and verifies
/// `(C_n')^-1 = I + nS` and `(I + nS) m_n' = m_0' + n G'^T Sigma_nu^-1 y`
/// in the variables whitened by `C_0^{1/2}`.
pub fn algebraic_law_check(
    g: &DMatrix<f64>,
    sigma_nu: &DMatrix<f64>,
    c0: &DMatrix<f64>,
    m0: &DVector<f64>,
    y: &DVector<f64>,
    n_max: usize,
) -> Result<AlgebraicLawReport, TheoryError> {
    let n_theta = g.ncols();
    let (c0_sqrt, c0_inv_sqrt) = sqrt_spd(c0)?;
    let g_prime = g * &c0_sqrt;
    let chol_nu = cholesky_psd(sigma_nu)?;
    let s = {
        let z = chol_nu.solve_lower(&g_prime);
        z.transpose() * z
    };
    let gty = g_prime.transpose() * chol_nu.solve_vec(y);
    let m0_prime = &c0_inv_sqrt * m0;

    // projection onto the observed subspace Range(S)
    let eig = s.clone().symmetric_eigen();
    let lam_max = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let mut p = DMatrix::zeros(n_theta, n_theta);
    for i in 0..n_theta {
        if eig.eigenvalues[i] > 1e-12 * lam_max {
            let v = eig.eigenvectors.column(i);
            p += v * v.transpose();
        }
    }

    let hp = HyperParams {
        alpha: 1.0,
        r0: DVector::zeros(n_theta),
        gamma: 1.0,
        sigma_omega: DMatrix::zeros(n_theta, n_theta),
        sigma_nu: sigma_nu.clone(),
        spread_a: 1.0,
    };
    let mut state = GaussianState::new(m0.clone(), c0.clone()).map_err(TheoryError::Gaussian)?;
    let eye = DMatrix::identity(n_theta, n_theta);

    let mut residuals = Vec::with_capacity(n_max);
    let mut max_precision_residual: f64 = 0.0;
    let mut max_mean_residual: f64 = 0.0;
    for n in 1..=n_max {
        state = kalman_step(&state, g, y, &hp).map_err(|e| TheoryError::Engine(e.to_string()))?;
        let c_inv = cholesky_psd(&state.cov)?.inverse();
        let precision_prime = symmetrized(&c0_sqrt * c_inv * &c0_sqrt);
        let target = &eye + &s * n as f64;
        let precision_residual = (&precision_prime - &target).norm();
        let m_prime = &c0_inv_sqrt * &state.mean;
        let mean_residual = (&target * m_prime - &m0_prime - &gty * n as f64).norm();
        let collapse_error = (&p * &precision_prime / n as f64 - &s).norm();
        max_precision_residual = max_precision_residual.max(precision_residual);
        max_mean_residual = max_mean_residual.max(mean_residual);
        residuals.push(LawResidual {
            n,
            precision_residual,
            mean_residual,
            collapse_error,
        });
    }
    Ok(AlgebraicLawReport {
        residuals,
        max_precision_residual,
        max_mean_residual,
    })
}

/// Per-step margins of the divergence bound `C_n <= C_0 + n Sigma_omega`.
#[derive(Debug, Clone)]
pub struct DivergenceBoundReport {
    /// Minimum eigenvalue of `C_0 + n Sigma_omega - C_n` per step.
    pub margins: Vec<f64>,
    /// Eigenvalue range of `C_0 + n Sigma_omega` per step (bound tightness scale).
    pub eigen_ranges: Vec<f64>,
    pub mean_step_norms: Vec<f64>,
    pub cov_norms: Vec<f64>,
    pub final_mean: DVector<f64>,
    pub min_margin: f64,
}

/// Runs the exact filter with `alpha = 1` and `Sigma_omega > 0` on a
/// (typically rank-deficient) `G` and verifies the covariance growth bound
/// while the mean converges.
pub fn divergence_bound_check(
    spec: &LinearProblemSpec,
    c0: &DMatrix<f64>,
    m0: &DVector<f64>,
    n_max: usize,
) -> Result<DivergenceBoundReport, TheoryError> {
    assert!(
        (spec.alpha - 1.0).abs() < 1e-15,
        "divergence bound applies to alpha = 1"
    );
    let hp = spec.hyper_params();
    let mut state = GaussianState::new(m0.clone(), c0.clone()).map_err(TheoryError::Gaussian)?;
    let mut margins = Vec::with_capacity(n_max);
    let mut eigen_ranges = Vec::with_capacity(n_max);
    let mut mean_step_norms = Vec::with_capacity(n_max);
    let mut cov_norms = Vec::with_capacity(n_max);
    let mut min_margin = f64::INFINITY;
    let mut prev_mean = state.mean.clone();
    for n in 1..=n_max {
        state = kalman_step(&state, &spec.g, &spec.y, &hp)
            .map_err(|e| TheoryError::Engine(e.to_string()))?;
        let bound = c0 + &spec.sigma_omega * n as f64;
        let slack = symmetrized(&bound - &state.cov);
        let eig = slack.symmetric_eigenvalues();
        let margin = eig.iter().cloned().fold(f64::INFINITY, f64::min);
        let bound_eig = bound.symmetric_eigenvalues();
        let range = bound_eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - bound_eig.iter().cloned().fold(f64::INFINITY, f64::min);
        min_margin = min_margin.min(margin);
        margins.push(margin);
        eigen_ranges.push(range);
        mean_step_norms.push((&state.mean - &prev_mean).norm());
        cov_norms.push(state.cov.norm());
        prev_mean = state.mean.clone();
    }
    Ok(DivergenceBoundReport {
        margins,
        eigen_ranges,
        mean_step_norms,
        cov_norms,
        final_mean: state.mean,
        min_margin,
    })
}
