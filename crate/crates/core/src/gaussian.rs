//! Gaussian state handling: safeguarded Cholesky factorization, the modified
//! unscented transform, and conditioning of joint Gaussians.
//!
//! Everything downstream (the inversion engines, the sampler, the theory
//! validators) is built on the four operations in this module. All functions
//! are pure; values are immutable once constructed and safe to share across
//! threads.

use nalgebra::{Cholesky, DMatrix, DVector};
use thiserror::Error;

/// Jitter escalation ladder, as multiples of `trace(C)/n + 1e-300`.
const JITTER_LADDER: [f64; 5] = [0.0, 1e-14, 1e-12, 1e-10, 1e-8];

#[derive(Debug, Error)]
pub enum GaussianError {
    /// The matrix stayed indefinite through the whole jitter escalation
    /// schedule. Usually the sign of a diverging run.
    #[error("Cholesky factorization failed for {size}x{size} matrix (jitter escalated to {max_jitter:.3e})")]
    FactorizationFailed { size: usize, max_jitter: f64 },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("matrix is not square: {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
}

/// Gaussian approximation `N(mean, cov)` of the filtering distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianState {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianState {
    /// Builds a state, symmetrizing the covariance.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self, GaussianError> {
        if cov.nrows() != cov.ncols() {
            return Err(GaussianError::NotSquare {
                rows: cov.nrows(),
                cols: cov.ncols(),
            });
        }
        if cov.nrows() != mean.len() {
            return Err(GaussianError::DimensionMismatch {
                expected: mean.len(),
                actual: cov.nrows(),
            });
        }
        Ok(Self {
            mean,
            cov: symmetrized(cov),
        })
    }

    /// Isotropic state `N(mean, scale * I)`.
    pub fn isotropic(mean: DVector<f64>, scale: f64) -> Self {
        let n = mean.len();
        Self {
            mean,
            cov: DMatrix::identity(n, n) * scale,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Lower-triangular factor of `C + jitter * I`.
#[derive(Debug, Clone)]
pub struct PsdCholesky {
    pub l: DMatrix<f64>,
    /// Jitter actually added to the diagonal; 0 when the plain factorization
    /// succeeded.
    pub jitter: f64,
}

impl PsdCholesky {
    /// Solves `(L L^T) x = b`.
    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let w = self
            .l
            .solve_lower_triangular(b)
            .expect("triangular solve on Cholesky factor");
        self.l
            .tr_solve_lower_triangular(&w)
            .expect("triangular solve on Cholesky factor")
    }

    /// Solves `L z = b` (forward substitution only).
    pub fn solve_lower(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.l
            .solve_lower_triangular(b)
            .expect("triangular solve on Cholesky factor")
    }

    pub fn solve_lower_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.l
            .solve_lower_triangular(b)
            .expect("triangular solve on Cholesky factor")
    }

    /// Full SPD inverse via back-substitution against the identity.
    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.l.nrows();
        let z = self.solve_lower(&DMatrix::identity(n, n));
        self.l
            .tr_solve_lower_triangular(&z)
            .expect("triangular solve on Cholesky factor")
    }

    /// log det(C + jitter I) = 2 sum log L_ii
    pub fn log_det(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }
}

/// Symmetrize-then-factor with a jitter escalation schedule.
///
/// Tries `delta` in `{0, 1e-14, 1e-12, 1e-10, 1e-8} * (trace(C)/n + 1e-300)`
/// and keeps the first factorization that succeeds, so near-singular
/// covariances stay usable without distorting well-conditioned ones.
pub fn cholesky_psd(c: &DMatrix<f64>) -> Result<PsdCholesky, GaussianError> {
    if c.nrows() != c.ncols() {
        return Err(GaussianError::NotSquare {
            rows: c.nrows(),
            cols: c.ncols(),
        });
    }
    let n = c.nrows();
    let sym = symmetrized(c.clone());
    let scale = sym.trace() / n as f64 + 1e-300;
    let mut max_jitter = 0.0;
    for &level in &JITTER_LADDER {
        let jitter = level * scale;
        max_jitter = jitter;
        let mut candidate = sym.clone();
        for i in 0..n {
            candidate[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(candidate) {
            return Ok(PsdCholesky {
                l: chol.l(),
                jitter,
            });
        }
    }
    Err(GaussianError::FactorizationFailed {
        size: n,
        max_jitter,
    })
}

/// `(C + C^T) / 2`
pub fn symmetrized(mut c: DMatrix<f64>) -> DMatrix<f64> {
    let t = c.transpose();
    c += t;
    c *= 0.5;
    c
}

/// Deterministic quadrature nodes of the modified unscented transform.
///
/// `points[0]` is the generating mean; `points[j]` and `points[j + n]` are the
/// symmetric pair `m +/- c_j [sqrt(C)]_j`. The mean rule uses the center value
/// only; the covariance rule weights every non-center node by `cov_weight`.
#[derive(Debug, Clone)]
pub struct SigmaPointSet {
    pub points: Vec<DVector<f64>>,
    /// Uniform covariance weight `1 / (2 a^2 n)`.
    pub cov_weight: f64,
    /// Spread parameter `a`.
    pub spread: f64,
}

impl SigmaPointSet {
    pub fn center(&self) -> &DVector<f64> {
        &self.points[0]
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Default spread rule `a = min(sqrt(4/n), 1)`.
pub fn default_spread(n_theta: usize) -> f64 {
    (4.0 / n_theta as f64).sqrt().min(1.0)
}

/// Generates the `2n + 1` sigma points of `N(m, C)` with spread `a`.
pub fn sigma_points(state: &GaussianState, a: f64) -> Result<SigmaPointSet, GaussianError> {
    assert!(a > 0.0, "sigma point spread must be positive");
    let n = state.dim();
    let chol = cholesky_psd(&state.cov)?;
    let c = a * (n as f64).sqrt();
    let mut points = Vec::with_capacity(2 * n + 1);
    points.push(state.mean.clone());
    for j in 0..n {
        points.push(&state.mean + chol.l.column(j) * c);
    }
    for j in 0..n {
        points.push(&state.mean - chol.l.column(j) * c);
    }
    Ok(SigmaPointSet {
        points,
        cov_weight: 1.0 / (2.0 * a * a * n as f64),
        spread: a,
    })
}

/// Weighted cross-covariance `sum_j W^c (f_j - f_0)(g_j - g_0)^T` over the
/// non-center nodes. Both value lists must align with the sigma points.
pub fn weighted_cross_cov(
    set: &SigmaPointSet,
    f_values: &[DVector<f64>],
    g_values: &[DVector<f64>],
) -> DMatrix<f64> {
    let nf = f_values[0].len();
    let ng = g_values[0].len();
    let mut acc = DMatrix::zeros(nf, ng);
    for j in 1..set.len() {
        let df = &f_values[j] - &f_values[0];
        let dg = &g_values[j] - &g_values[0];
        acc += df * dg.transpose() * set.cov_weight;
    }
    acc
}

/// Gaussian projection of the joint distribution of `(theta, y)`.
#[derive(Debug, Clone)]
pub struct JointGaussian {
    pub mean_theta: DVector<f64>,
    pub mean_y: DVector<f64>,
    pub cov_theta: DMatrix<f64>,
    pub cov_theta_y: DMatrix<f64>,
    pub cov_yy: DMatrix<f64>,
}

/// Quadrature approximation of the joint Gaussian of `(theta, G(theta))`.
///
/// `g_values[j]` must be the forward value at `points[j]`. Means use the
/// center node only (first-order mean rule); `noise_cov` is added to the
/// `yy` block and must be positive definite for later conditioning.
pub fn unscented_joint(
    points: &SigmaPointSet,
    g_values: &[DVector<f64>],
    prior_cov: &DMatrix<f64>,
    noise_cov: &DMatrix<f64>,
) -> Result<JointGaussian, GaussianError> {
    if g_values.len() != points.len() {
        return Err(GaussianError::DimensionMismatch {
            expected: points.len(),
            actual: g_values.len(),
        });
    }
    let n_y = g_values[0].len();
    if noise_cov.nrows() != n_y {
        return Err(GaussianError::DimensionMismatch {
            expected: n_y,
            actual: noise_cov.nrows(),
        });
    }
    let cov_theta_y = weighted_cross_cov(points, &points.points, g_values);
    let mut cov_yy = weighted_cross_cov(points, g_values, g_values);
    cov_yy += noise_cov;
    Ok(JointGaussian {
        mean_theta: points.center().clone(),
        mean_y: g_values[0].clone(),
        cov_theta: prior_cov.clone(),
        cov_theta_y,
        cov_yy: symmetrized(cov_yy),
    })
}

/// Conditions the joint Gaussian on an observed `y`.
///
/// Solves through the Cholesky factor of the `yy` block; the covariance
/// decrement is assembled as `Z^T Z`, which keeps it symmetric positive
/// semidefinite by construction.
pub fn gaussian_condition(
    joint: &JointGaussian,
    y_obs: &DVector<f64>,
) -> Result<GaussianState, GaussianError> {
    if y_obs.len() != joint.mean_y.len() {
        return Err(GaussianError::DimensionMismatch {
            expected: joint.mean_y.len(),
            actual: y_obs.len(),
        });
    }
    let chol = cholesky_psd(&joint.cov_yy)?;
    // Z = L^-1 C_theta_y^T, so C_theta_y Cyy^-1 C_theta_y^T = Z^T Z
    let z = chol.solve_lower(&joint.cov_theta_y.transpose());
    let u = chol.solve_lower_vec(&(y_obs - &joint.mean_y));
    let mean = &joint.mean_theta + z.transpose() * u;
    let cov = &joint.cov_theta - z.transpose() * &z;
    Ok(GaussianState {
        mean,
        cov: symmetrized(cov),
    })
}
