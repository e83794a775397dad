//! Derivative-free inversion via iterated Kalman methods.
//!
//! The toolkit embeds an inverse problem `y = G(theta) + eta` into a
//! stochastic dynamical system
//!
//! ```text
//! theta_{n+1} = alpha * theta_n + (1 - alpha) * r0 + omega_{n+1}
//! y_{n+1}     = G(theta_{n+1}) + nu_{n+1}
//! ```
//!
//! and runs nonlinear Kalman filters on it with the observation pinned to the
//! data. Iterating the filter drives the mean to the minimizer of a Tikhonov
//! regularized least-squares functional; the covariance supplies an adaptive
//! preconditioner. Four engines are provided (unscented, ensemble, extended,
//! and the exact linear filter), together with executable validators for the
//! linear convergence theory, an unscented Kalman sampler for approximate
//! posteriors, and a set of benchmark forward models.

pub mod engines;
pub mod gaussian;
pub mod landscape;
pub mod mcmc;
pub mod problems;
pub mod theory;
pub mod uks;

pub use engines::{
    eki_step, exki_step, kalman_step, predict, run, uki_step, ConvergenceRecord, Ensemble,
    EngineError, HyperParams, Method, RunOutput, State,
};
pub use gaussian::{
    cholesky_psd, gaussian_condition, sigma_points, unscented_joint, GaussianError, GaussianState,
    JointGaussian, SigmaPointSet,
};
pub use problems::{add_noise, constrain, ConstraintTransform, ForwardError, InverseProblem};
