//! Benchmark inverse problems: forward models, truth generation, noise
//! injection, and constraint transforms.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

pub mod darcy;
pub mod kl;
pub mod linear;
pub mod lorenz63;
pub mod lorenz96;

pub use darcy::{darcy2d, DarcyConfig};
pub use kl::KlField2d;
pub use linear::{hilbert, linear2, Linear2Variant};
pub use lorenz63::{lorenz63, lorenz63_with_windows, Lorenz63Variant, TimeAverageSpec};
pub use lorenz96::{lorenz96_multiscale, lorenz96_with_config, Lorenz96Config};

/// Failure modes of a forward-model evaluation.
#[derive(Debug, Clone, Error)]
pub enum ForwardError {
    #[error("trajectory blowup: state norm {norm:.3e} exceeded the bound")]
    TrajectoryBlowup { norm: f64 },
    #[error("discrete solve failed: relative residual {residual:.3e} above 1e-10")]
    SolveFailure { residual: f64 },
    #[error("forward map produced a non-finite value")]
    NonFinite,
    #[error("forward input has length {actual}, expected {expected}")]
    BadInput { expected: usize, actual: usize },
}

pub type ForwardFn = dyn Fn(&DVector<f64>) -> Result<DVector<f64>, ForwardError> + Send + Sync;
pub type JacobianFn = dyn Fn(&DVector<f64>) -> Result<DMatrix<f64>, ForwardError> + Send + Sync;
pub type FieldErrorFn = dyn Fn(&DVector<f64>) -> f64 + Send + Sync;
pub type ThetaMapFn = dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync;

/// Black-box inverse problem `y = G(theta) + eta`.
///
/// `forward` must be reentrant: engines may evaluate sigma points or ensemble
/// members concurrently. `theta_map` translates engine-space parameters into
/// physical ones (identity unless the problem was wrapped by [`constrain`]);
/// `theta_ref` and `field_error` are expressed in physical space.
#[derive(Clone)]
pub struct InverseProblem {
    pub n_theta: usize,
    pub n_y: usize,
    pub forward: Arc<ForwardFn>,
    pub jacobian: Option<Arc<JacobianFn>>,
    pub y_obs: DVector<f64>,
    pub sigma_eta: DMatrix<f64>,
    pub theta_ref: Option<DVector<f64>>,
    pub field_error: Option<Arc<FieldErrorFn>>,
    pub theta_map: Option<Arc<ThetaMapFn>>,
}

impl std::fmt::Debug for InverseProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("InverseProblem")
            .field("n_theta", &self.n_theta)
            .field("n_y", &self.n_y)
            .field("has_jacobian", &self.jacobian.is_some())
            .field("theta_ref", &self.theta_ref)
            .finish()
    }
}

impl InverseProblem {
    /// Evaluates the forward map, checking the output length.
    pub fn evaluate(&self, theta: &DVector<f64>) -> Result<DVector<f64>, ForwardError> {
        if theta.len() != self.n_theta {
            return Err(ForwardError::BadInput {
                expected: self.n_theta,
                actual: theta.len(),
            });
        }
        let out = (self.forward)(theta)?;
        if out.len() != self.n_y {
            return Err(ForwardError::BadInput {
                expected: self.n_y,
                actual: out.len(),
            });
        }
        Ok(out)
    }

    /// Engine-space parameter mapped to physical space.
    pub fn map_theta(&self, theta: &DVector<f64>) -> DVector<f64> {
        match &self.theta_map {
            Some(map) => map(theta),
            None => theta.clone(),
        }
    }

    /// `||phi(theta) - theta_ref||_2` when a reference parameter is known.
    pub fn param_error(&self, theta: &DVector<f64>) -> Option<f64> {
        self.theta_ref
            .as_ref()
            .map(|tr| (self.map_theta(theta) - tr).norm())
    }

    /// Data misfit `Phi(theta) = 0.5 ||Sigma_eta^-1/2 (y_obs - G(theta))||^2`.
    pub fn misfit(&self, theta: &DVector<f64>) -> Result<f64, ForwardError> {
        let g = self.evaluate(theta)?;
        let r = &self.y_obs - g;
        let chol = crate::gaussian::cholesky_psd(&self.sigma_eta)
            .map_err(|_| ForwardError::NonFinite)?;
        let w = chol.solve_lower_vec(&r);
        Ok(0.5 * w.norm_squared())
    }

    /// Replaces the observation with a noisy copy (see [`add_noise`]).
    pub fn with_observation_noise(mut self, level: f64, seed: u64) -> Self {
        self.y_obs = add_noise(&self.y_obs, level, seed);
        self
    }

    /// Attaches a central finite-difference Jacobian (step `1e-6 * (1 + |theta_i|)`)
    /// for engines that need one when the model supplies none.
    pub fn with_fd_jacobian(mut self) -> Self {
        let forward = Arc::clone(&self.forward);
        let n_y = self.n_y;
        self.jacobian = Some(Arc::new(move |theta: &DVector<f64>| {
            let n = theta.len();
            let mut jac = DMatrix::zeros(n_y, n);
            for i in 0..n {
                let h = 1e-6 * (1.0 + theta[i].abs());
                let mut lo = theta.clone();
                let mut hi = theta.clone();
                lo[i] -= h;
                hi[i] += h;
                let flo = forward(&lo)?;
                let fhi = forward(&hi)?;
                jac.set_column(i, &((fhi - flo) / (2.0 * h)));
            }
            Ok(jac)
        }));
        self
    }

    /// Writes the observation vector as CSV: one header row, one value per line.
    pub fn write_observations_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "y_obs")?;
        for v in self.y_obs.iter() {
            writeln!(f, "{}", format_g17(*v))?;
        }
        Ok(())
    }
}

/// Formats a double with 17 significant digits (round-trip exact).
pub fn format_g17(x: f64) -> String {
    format!("{x:.16e}")
}

/// Multiplicative Gaussian observation noise `y_ref + (level * y_ref) .* xi`.
pub fn add_noise(y_ref: &DVector<f64>, level: f64, seed: u64) -> DVector<f64> {
    assert!(level >= 0.0, "noise level must be nonnegative");
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = y_ref.clone();
    for v in out.iter_mut() {
        let xi: f64 = StandardNormal.sample(&mut rng);
        *v += level * *v * xi;
    }
    out
}

/// Element-wise parameter transforms that keep forward evaluations feasible.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConstraintTransform {
    /// `phi(t) = |t|`, enforcing `theta >= 0`.
    NonNegative,
    /// `phi(t) = min + (max - min) / (1 + |t|)`, range `(min, max]`.
    Box { theta_min: f64, theta_max: f64 },
}

impl ConstraintTransform {
    pub fn apply_scalar(&self, t: f64) -> f64 {
        match *self {
            ConstraintTransform::NonNegative => t.abs(),
            ConstraintTransform::Box {
                theta_min,
                theta_max,
            } => theta_min + (theta_max - theta_min) / (1.0 + t.abs()),
        }
    }

    fn derivative_scalar(&self, t: f64) -> f64 {
        let sign = if t > 0.0 {
            1.0
        } else if t < 0.0 {
            -1.0
        } else {
            0.0
        };
        match *self {
            ConstraintTransform::NonNegative => sign,
            ConstraintTransform::Box {
                theta_min,
                theta_max,
            } => {
                let d = 1.0 + t.abs();
                -(theta_max - theta_min) * sign / (d * d)
            }
        }
    }

    pub fn apply(&self, t: &DVector<f64>) -> DVector<f64> {
        t.map(|v| self.apply_scalar(v))
    }
}

/// Reformulates the problem as `y = G(phi(theta~)) + eta`.
///
/// The returned problem lives in the unconstrained variable; `theta_map`,
/// `field_error`, and the Jacobian (chain rule) are composed with `phi`.
pub fn constrain(problem: &InverseProblem, transform: ConstraintTransform) -> InverseProblem {
    if let ConstraintTransform::Box {
        theta_min,
        theta_max,
    } = transform
    {
        assert!(theta_min < theta_max, "box constraint requires min < max");
    }
    let inner_forward = Arc::clone(&problem.forward);
    let t_fwd = transform;
    let forward: Arc<ForwardFn> =
        Arc::new(move |theta: &DVector<f64>| inner_forward(&t_fwd.apply(theta)));

    let jacobian = problem.jacobian.as_ref().map(|j| {
        let inner = Arc::clone(j);
        let t = transform;
        let wrapped: Arc<JacobianFn> = Arc::new(move |theta: &DVector<f64>| {
            let phys = t.apply(theta);
            let mut jac = inner(&phys)?;
            for (i, v) in theta.iter().enumerate() {
                let scale = t.derivative_scalar(*v);
                let mut col = jac.column_mut(i);
                col *= scale;
            }
            Ok(jac)
        });
        wrapped
    });

    let field_error = problem.field_error.as_ref().map(|fe| {
        let inner = Arc::clone(fe);
        let t = transform;
        let wrapped: Arc<FieldErrorFn> = Arc::new(move |theta: &DVector<f64>| inner(&t.apply(theta)));
        wrapped
    });

    let prev_map = problem.theta_map.clone();
    let t_map = transform;
    let theta_map: Arc<ThetaMapFn> = Arc::new(move |theta: &DVector<f64>| {
        let phys = t_map.apply(theta);
        match &prev_map {
            Some(m) => m(&phys),
            None => phys,
        }
    });

    InverseProblem {
        n_theta: problem.n_theta,
        n_y: problem.n_y,
        forward,
        jacobian,
        y_obs: problem.y_obs.clone(),
        sigma_eta: problem.sigma_eta.clone(),
        theta_ref: problem.theta_ref.clone(),
        field_error,
        theta_map: Some(theta_map),
    }
}
