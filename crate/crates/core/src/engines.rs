//! Iteration maps for the inversion engines (UKI, ExKI, EKI, exact linear
//! Kalman filter) over the regularizing stochastic dynamics
//!
//! ```text
//! theta_{n+1} = alpha theta_n + (1 - alpha) r0 + omega,   omega ~ N(0, Sigma_omega)
//! y           = G(theta_{n+1}) + nu,                      nu    ~ N(0, Sigma_nu)
//! ```
//!
//! and the run loop that applies a step map with the observation held fixed,
//! recording convergence diagnostics per iteration.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::gaussian::{
    cholesky_psd, default_spread, gaussian_condition, sigma_points, symmetrized, unscented_joint,
    GaussianError, GaussianState, JointGaussian,
};
use crate::problems::{ForwardError, InverseProblem};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Gaussian(#[from] GaussianError),
    #[error("forward model failed at evaluation {index}: {source}")]
    ForwardModelFailure { index: usize, source: ForwardError },
    #[error("problem supplies no Jacobian; enable the finite-difference fallback to run ExKI")]
    JacobianUnavailable,
    #[error("run needs at least one iteration")]
    InvalidIterations,
    #[error("ensemble needs at least two particles")]
    EnsembleTooSmall,
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperParams(String),
    #[error("method {method} cannot start from the supplied initial state")]
    InitMismatch { method: &'static str },
}

/// Hyperparameters of the stochastic dynamics.
///
/// The default prescription derives the artificial covariances from the
/// observation error: `Sigma_nu = 2 Sigma_eta`, `Sigma_omega = (2 - alpha^2) gamma I`.
#[derive(Debug, Clone)]
pub struct HyperParams {
    pub alpha: f64,
    pub r0: DVector<f64>,
    pub gamma: f64,
    pub sigma_omega: DMatrix<f64>,
    pub sigma_nu: DMatrix<f64>,
    pub spread_a: f64,
}

impl HyperParams {
    /// Standard prescription from `alpha`, prior mean, scale, and the
    /// problem's observation-error covariance.
    pub fn standard(
        alpha: f64,
        r0: DVector<f64>,
        gamma: f64,
        sigma_eta: &DMatrix<f64>,
    ) -> Result<Self, EngineError> {
        let n_theta = r0.len();
        let hp = Self {
            alpha,
            spread_a: default_spread(n_theta),
            sigma_omega: DMatrix::identity(n_theta, n_theta) * ((2.0 - alpha * alpha) * gamma),
            sigma_nu: sigma_eta * 2.0,
            r0,
            gamma,
        };
        hp.validate()?;
        Ok(hp)
    }

    /// Standard prescription sized for a problem.
    pub fn for_problem(
        problem: &InverseProblem,
        alpha: f64,
        r0: DVector<f64>,
        gamma: f64,
    ) -> Result<Self, EngineError> {
        if r0.len() != problem.n_theta {
            return Err(EngineError::InvalidHyperParams(format!(
                "r0 has length {}, problem expects {}",
                r0.len(),
                problem.n_theta
            )));
        }
        Self::standard(alpha, r0, gamma, &problem.sigma_eta)
    }

    pub fn with_spread(mut self, a: f64) -> Self {
        self.spread_a = a;
        self
    }

    fn validate(&self) -> Result<(), EngineError> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(EngineError::InvalidHyperParams(
                "alpha must lie in (0,1]".into(),
            ));
        }
        if self.gamma <= 0.0 {
            return Err(EngineError::InvalidHyperParams("gamma must be positive".into()));
        }
        if self.spread_a <= 0.0 {
            return Err(EngineError::InvalidHyperParams(
                "spread a must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn n_theta(&self) -> usize {
        self.r0.len()
    }
}

/// Particle approximation of the filtering distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub particles: Vec<DVector<f64>>,
    pub rng_seed: u64,
}

impl Ensemble {
    /// Draws `size` particles from `N(mean, cov)` using the stored seed.
    pub fn sample(
        mean: &DVector<f64>,
        cov: &DMatrix<f64>,
        size: usize,
        seed: u64,
    ) -> Result<Self, EngineError> {
        if size < 2 {
            return Err(EngineError::EnsembleTooSmall);
        }
        let chol = cholesky_psd(cov)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let particles = (0..size)
            .map(|_| mean + mvn_draw(&chol.l, &mut rng))
            .collect();
        Ok(Self {
            particles,
            rng_seed: seed,
        })
    }

    /// Generator for step noise. Runs on a separate ChaCha stream so the
    /// draws never overlap the ones that produced the initial particles.
    pub fn step_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng_seed);
        rng.set_stream(1);
        rng
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn mean(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.particles[0].len());
        for p in &self.particles {
            m += p;
        }
        m / self.len() as f64
    }

    /// Empirical covariance with `1/(J-1)` normalization.
    pub fn covariance(&self) -> DMatrix<f64> {
        let m = self.mean();
        let n = self.particles[0].len();
        let mut cov = DMatrix::zeros(n, n);
        for p in &self.particles {
            let d = p - &m;
            cov += &d * d.transpose();
        }
        cov / (self.len() - 1) as f64
    }
}

fn mvn_draw(l: &DMatrix<f64>, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let z = DVector::from_fn(l.nrows(), |_, _| StandardNormal.sample(rng));
    l * z
}

/// Prediction step: `m -> alpha m + (1-alpha) r0`, `C -> alpha^2 C + Sigma_omega`.
pub fn predict(state: &GaussianState, hp: &HyperParams) -> GaussianState {
    let mean = &state.mean * hp.alpha + &hp.r0 * (1.0 - hp.alpha);
    let cov = &state.cov * (hp.alpha * hp.alpha) + &hp.sigma_omega;
    GaussianState {
        mean,
        cov: symmetrized(cov),
    }
}

/// Evaluates the forward map at a batch of points, possibly in parallel.
/// Results are gathered in index order and the first failure (by index) wins,
/// so the outcome is independent of scheduling.
pub(crate) fn evaluate_batch(
    problem: &InverseProblem,
    points: &[DVector<f64>],
) -> Result<Vec<DVector<f64>>, EngineError> {
    let raw: Vec<Result<DVector<f64>, ForwardError>> =
        points.par_iter().map(|p| problem.evaluate(p)).collect();
    let mut out = Vec::with_capacity(raw.len());
    for (index, r) in raw.into_iter().enumerate() {
        match r {
            Ok(v) => {
                if v.iter().all(|x| x.is_finite()) {
                    out.push(v);
                } else {
                    return Err(EngineError::ForwardModelFailure {
                        index,
                        source: ForwardError::NonFinite,
                    });
                }
            }
            Err(source) => return Err(EngineError::ForwardModelFailure { index, source }),
        }
    }
    Ok(out)
}

/// One unscented Kalman inversion step: exactly `2 n_theta + 1` forward
/// evaluations.
pub fn uki_step(
    state: &GaussianState,
    problem: &InverseProblem,
    hp: &HyperParams,
) -> Result<GaussianState, EngineError> {
    let predicted = predict(state, hp);
    let set = sigma_points(&predicted, hp.spread_a)?;
    let g_values = evaluate_batch(problem, &set.points)?;
    let joint = unscented_joint(&set, &g_values, &predicted.cov, &hp.sigma_nu)?;
    Ok(gaussian_condition(&joint, &problem.y_obs)?)
}

/// One extended Kalman inversion step (linearization about the predicted mean).
pub fn exki_step(
    state: &GaussianState,
    problem: &InverseProblem,
    hp: &HyperParams,
) -> Result<GaussianState, EngineError> {
    let jac = problem
        .jacobian
        .as_ref()
        .ok_or(EngineError::JacobianUnavailable)?;
    let predicted = predict(state, hp);
    let y_hat = problem
        .evaluate(&predicted.mean)
        .map_err(|source| EngineError::ForwardModelFailure { index: 0, source })?;
    if !y_hat.iter().all(|x| x.is_finite()) {
        return Err(EngineError::ForwardModelFailure {
            index: 0,
            source: ForwardError::NonFinite,
        });
    }
    let dg = jac(&predicted.mean)
        .map_err(|source| EngineError::ForwardModelFailure { index: 0, source })?;
    let cov_theta_y = &predicted.cov * dg.transpose();
    let cov_yy = &dg * &predicted.cov * dg.transpose() + &hp.sigma_nu;
    let joint = JointGaussian {
        mean_theta: predicted.mean.clone(),
        mean_y: y_hat,
        cov_theta: predicted.cov.clone(),
        cov_theta_y,
        cov_yy: symmetrized(cov_yy),
    };
    Ok(gaussian_condition(&joint, &problem.y_obs)?)
}

/// One exact linear Kalman step for `y = G theta + nu`.
pub fn kalman_step(
    state: &GaussianState,
    g: &DMatrix<f64>,
    y: &DVector<f64>,
    hp: &HyperParams,
) -> Result<GaussianState, EngineError> {
    let predicted = predict(state, hp);
    let joint = JointGaussian {
        mean_y: g * &predicted.mean,
        cov_theta_y: &predicted.cov * g.transpose(),
        cov_yy: symmetrized(g * &predicted.cov * g.transpose() + &hp.sigma_nu),
        mean_theta: predicted.mean,
        cov_theta: predicted.cov,
    };
    Ok(gaussian_condition(&joint, y)?)
}

/// One ensemble Kalman inversion step: exactly `J` forward evaluations.
///
/// Noise draws come from the caller's generator in a fixed order (all
/// evolution draws, then all observation draws, by particle index), so output
/// is bit-reproducible regardless of how forward evaluations are scheduled.
pub fn eki_step(
    ens: &Ensemble,
    problem: &InverseProblem,
    hp: &HyperParams,
    rng: &mut ChaCha8Rng,
) -> Result<Ensemble, EngineError> {
    let j = ens.len();
    if j < 2 {
        return Err(EngineError::EnsembleTooSmall);
    }
    let chol_omega = cholesky_psd(&hp.sigma_omega)?;
    let chol_nu_draw = cholesky_psd(&hp.sigma_nu)?;

    let predicted: Vec<DVector<f64>> = ens
        .particles
        .iter()
        .map(|p| p * hp.alpha + &hp.r0 * (1.0 - hp.alpha) + mvn_draw(&chol_omega.l, rng))
        .collect();
    let g_values = evaluate_batch(problem, &predicted)?;
    let noises: Vec<DVector<f64>> = (0..j).map(|_| mvn_draw(&chol_nu_draw.l, rng)).collect();

    let mut m_hat = DVector::zeros(problem.n_theta);
    for p in &predicted {
        m_hat += p;
    }
    m_hat /= j as f64;
    let mut y_hat = DVector::zeros(problem.n_y);
    for g in &g_values {
        y_hat += g;
    }
    y_hat /= j as f64;

    let mut cov_theta_y = DMatrix::zeros(problem.n_theta, problem.n_y);
    let mut cov_yy = DMatrix::zeros(problem.n_y, problem.n_y);
    for (p, g) in predicted.iter().zip(&g_values) {
        let dp = p - &m_hat;
        let dg = g - &y_hat;
        cov_theta_y += &dp * dg.transpose();
        cov_yy += &dg * dg.transpose();
    }
    cov_theta_y /= (j - 1) as f64;
    cov_yy /= (j - 1) as f64;
    cov_yy += &hp.sigma_nu;

    let chol_yy = cholesky_psd(&symmetrized(cov_yy))?;
    let particles = predicted
        .iter()
        .zip(&g_values)
        .zip(&noises)
        .map(|((p, g), nu)| {
            let innov = &problem.y_obs - g - nu;
            let u = chol_yy.solve_vec(&innov);
            p + &cov_theta_y * u
        })
        .collect();
    Ok(Ensemble {
        particles,
        rng_seed: ens.rng_seed,
    })
}

/// Per-iteration convergence diagnostics.
#[derive(Debug, Clone)]
pub struct ConvergenceRecord {
    pub iteration: usize,
    pub mean: DVector<f64>,
    pub cov_frobenius: f64,
    /// Data misfit `Phi` at the mean, normalized by the problem's Sigma_eta.
    pub misfit: f64,
    pub param_error: Option<f64>,
    pub field_error: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Uki,
    Exki,
    Eki,
    Kf,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Uki => "uki",
            Method::Exki => "exki",
            Method::Eki => "eki",
            Method::Kf => "kf",
        }
    }
}

/// Engine state: Gaussian for UKI/ExKI/KF, particles for EKI.
#[derive(Debug, Clone)]
pub enum State {
    Gaussian(GaussianState),
    Ensemble(Ensemble),
}

impl State {
    pub fn mean(&self) -> DVector<f64> {
        match self {
            State::Gaussian(g) => g.mean.clone(),
            State::Ensemble(e) => e.mean(),
        }
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        match self {
            State::Gaussian(g) => g.cov.clone(),
            State::Ensemble(e) => e.covariance(),
        }
    }
}

#[derive(Debug)]
pub struct RunOutput {
    pub history: Vec<ConvergenceRecord>,
    pub final_state: State,
}

/// A failed run carries the records of every completed iteration.
#[derive(Debug, Error)]
#[error("run aborted at iteration {iteration}: {source}")]
pub struct RunError {
    pub iteration: usize,
    pub source: EngineError,
    pub history: Vec<ConvergenceRecord>,
}

fn make_record(
    problem: &InverseProblem,
    iteration: usize,
    mean: DVector<f64>,
    cov_frobenius: f64,
) -> Result<ConvergenceRecord, EngineError> {
    let misfit = problem
        .misfit(&mean)
        .map_err(|source| EngineError::ForwardModelFailure { index: 0, source })?;
    let param_error = problem.param_error(&mean);
    let field_error = problem.field_error.as_ref().map(|fe| fe(&mean));
    Ok(ConvergenceRecord {
        iteration,
        mean,
        cov_frobenius,
        misfit,
        param_error,
        field_error,
    })
}

/// Applies the chosen step map `n_iters` times with the observation held
/// fixed. Aborts with the partial history attached on any step error.
pub fn run(
    method: Method,
    problem: &InverseProblem,
    hp: &HyperParams,
    init: State,
    n_iters: usize,
) -> Result<RunOutput, RunError> {
    let fail = |iteration: usize, source: EngineError, history: Vec<ConvergenceRecord>| RunError {
        iteration,
        source,
        history,
    };
    if n_iters == 0 {
        return Err(fail(0, EngineError::InvalidIterations, Vec::new()));
    }
    let mut history = Vec::with_capacity(n_iters);
    match (method, init) {
        (Method::Eki, State::Ensemble(mut ens)) => {
            let mut rng = ens.step_rng();
            for it in 1..=n_iters {
                ens = eki_step(&ens, problem, hp, &mut rng)
                    .map_err(|e| fail(it, e, history.clone()))?;
                let rec = make_record(problem, it, ens.mean(), ens.covariance().norm())
                    .map_err(|e| fail(it, e, history.clone()))?;
                history.push(rec);
            }
            Ok(RunOutput {
                history,
                final_state: State::Ensemble(ens),
            })
        }
        (Method::Eki, _) => Err(fail(
            0,
            EngineError::InitMismatch { method: "eki" },
            Vec::new(),
        )),
        (method, State::Gaussian(mut state)) => {
            // the linear operator for the exact filter comes from the
            // problem's (constant) Jacobian
            let g_linear = if method == Method::Kf {
                let jac = problem
                    .jacobian
                    .as_ref()
                    .ok_or_else(|| fail(0, EngineError::JacobianUnavailable, Vec::new()))?;
                Some(
                    jac(&DVector::zeros(problem.n_theta))
                        .map_err(|source| {
                            fail(
                                0,
                                EngineError::ForwardModelFailure { index: 0, source },
                                Vec::new(),
                            )
                        })?,
                )
            } else {
                None
            };
            for it in 1..=n_iters {
                state = match method {
                    Method::Uki => uki_step(&state, problem, hp),
                    Method::Exki => exki_step(&state, problem, hp),
                    Method::Kf => {
                        kalman_step(&state, g_linear.as_ref().unwrap(), &problem.y_obs, hp)
                    }
                    Method::Eki => unreachable!(),
                }
                .map_err(|e| fail(it, e, history.clone()))?;
                let rec = make_record(problem, it, state.mean.clone(), state.cov.norm())
                    .map_err(|e| fail(it, e, history.clone()))?;
                history.push(rec);
            }
            Ok(RunOutput {
                history,
                final_state: State::Gaussian(state),
            })
        }
        (m, State::Ensemble(_)) => Err(fail(
            0,
            EngineError::InitMismatch { method: m.name() },
            Vec::new(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{linear2, Linear2Variant};

    fn scalar_problem() -> InverseProblem {
        // G(theta) = theta, y = 1, Sigma_eta = 1
        crate::problems::linear::from_matrix(
            DMatrix::identity(1, 1),
            DVector::from_vec(vec![1.0]),
            DMatrix::identity(1, 1),
            Some(DVector::from_vec(vec![1.0])),
        )
    }

    fn scalar_hp() -> HyperParams {
        HyperParams::standard(1.0, DVector::zeros(1), 1.0, &DMatrix::identity(1, 1)).unwrap()
    }

    #[test]
    fn standard_prescription() {
        let hp = HyperParams::standard(
            0.5,
            DVector::zeros(2),
            0.25,
            &(DMatrix::identity(2, 2) * 0.01),
        )
        .unwrap();
        assert!((hp.sigma_nu[(0, 0)] - 0.02).abs() < 1e-15);
        assert!((hp.sigma_omega[(0, 0)] - (2.0 - 0.25) * 0.25).abs() < 1e-15);
        assert_eq!(hp.spread_a, 1.0); // min(sqrt(4/2), 1)
        assert!(HyperParams::standard(1.5, DVector::zeros(1), 1.0, &DMatrix::identity(1, 1))
            .is_err());
    }

    #[test]
    fn predict_cases() {
        let state = GaussianState::isotropic(DVector::from_vec(vec![4.0]), 1.0);
        // alpha = 1: mean unchanged, cov inflated
        let hp1 = scalar_hp();
        let p1 = predict(&state, &hp1);
        assert_eq!(p1.mean[0], 4.0);
        assert_eq!(p1.cov[(0, 0)], 2.0);
        // alpha = 0.5, r0 = 2, Sigma_omega = 1
        let mut hp2 = HyperParams::standard(
            0.5,
            DVector::from_vec(vec![2.0]),
            1.0,
            &DMatrix::identity(1, 1),
        )
        .unwrap();
        hp2.sigma_omega = DMatrix::identity(1, 1);
        let p2 = predict(&state, &hp2);
        assert_eq!(p2.mean[0], 3.0);
        assert_eq!(p2.cov[(0, 0)], 1.25);
        // alpha -> 0 limit: full relaxation to the prior
        let mut hp3 = hp2.clone();
        hp3.alpha = 1e-300;
        let p3 = predict(&state, &hp3);
        assert!((p3.mean[0] - 2.0).abs() < 1e-290);
        assert!((p3.cov[(0, 0)] - 1.0).abs() < 1e-290);
    }

    #[test]
    fn uki_scalar_single_step() {
        let problem = scalar_problem();
        let hp = scalar_hp();
        let s0 = GaussianState::isotropic(DVector::zeros(1), 1.0);
        let s1 = uki_step(&s0, &problem, &hp).unwrap();
        assert!((s1.mean[0] - 0.5).abs() < 1e-12);
        assert!((s1.cov[(0, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uki_scalar_geometric_convergence() {
        let problem = scalar_problem();
        let hp = scalar_hp();
        let mut s = GaussianState::isotropic(DVector::zeros(1), 1.0);
        for n in 1..=12 {
            s = uki_step(&s, &problem, &hp).unwrap();
            let expect = 1.0 - 0.5f64.powi(n);
            assert!((s.mean[0] - expect).abs() < 1e-10, "n={n}");
            assert!((s.cov[(0, 0)] - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn exki_matches_kalman_exactly_on_linear() {
        let problem = linear2(Linear2Variant::Od);
        let hp = HyperParams::for_problem(&problem, 0.7, DVector::zeros(2), 0.5).unwrap();
        let g = problem.jacobian.as_ref().unwrap()(&DVector::zeros(2)).unwrap();
        let mut se = GaussianState::isotropic(DVector::zeros(2), 0.5);
        let mut sk = se.clone();
        for _ in 0..10 {
            se = exki_step(&se, &problem, &hp).unwrap();
            sk = kalman_step(&sk, &g, &problem.y_obs, &hp).unwrap();
            assert!((se.mean.clone() - &sk.mean).norm() < 1e-13);
            assert!((se.cov.clone() - &sk.cov).norm() < 1e-13);
        }
    }

    #[test]
    fn exki_scalar_step() {
        let problem = scalar_problem();
        let hp = scalar_hp();
        let s1 = exki_step(
            &GaussianState::isotropic(DVector::zeros(1), 1.0),
            &problem,
            &hp,
        )
        .unwrap();
        assert!((s1.mean[0] - 0.5).abs() < 1e-14);
        assert!((s1.cov[(0, 0)] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn exki_quadratic_stalls_at_zero_gradient() {
        use std::sync::Arc;
        // G(theta) = theta^2 with exact Jacobian 2 theta: at m = 0 the update
        // must leave the mean unchanged whatever the data say
        let problem = InverseProblem {
            n_theta: 1,
            n_y: 1,
            forward: Arc::new(|t: &DVector<f64>| Ok(DVector::from_vec(vec![t[0] * t[0]]))),
            jacobian: Some(Arc::new(|t: &DVector<f64>| {
                Ok(DMatrix::from_element(1, 1, 2.0 * t[0]))
            })),
            y_obs: DVector::from_vec(vec![5.0]),
            sigma_eta: DMatrix::identity(1, 1),
            theta_ref: None,
            field_error: None,
            theta_map: None,
        };
        let hp = scalar_hp();
        let s1 = exki_step(
            &GaussianState::isotropic(DVector::zeros(1), 1.0),
            &problem,
            &hp,
        )
        .unwrap();
        assert_eq!(s1.mean[0], 0.0);
    }

    #[test]
    fn exki_requires_jacobian() {
        let mut problem = scalar_problem();
        problem.jacobian = None;
        let hp = scalar_hp();
        let res = exki_step(
            &GaussianState::isotropic(DVector::zeros(1), 1.0),
            &problem,
            &hp,
        );
        assert!(matches!(res, Err(EngineError::JacobianUnavailable)));
    }

    #[test]
    fn kalman_zero_innovation_keeps_mean() {
        let problem = linear2(Linear2Variant::Ns);
        let g = problem.jacobian.as_ref().unwrap()(&DVector::zeros(2)).unwrap();
        let hp = HyperParams::for_problem(&problem, 1.0, DVector::zeros(2), 0.25).unwrap();
        let m = DVector::from_vec(vec![1.0, 1.0]);
        let y = &g * &m;
        let s = GaussianState::isotropic(m.clone(), 0.25);
        let out = kalman_step(&s, &g, &y, &hp).unwrap();
        assert!((out.mean - m).norm() < 1e-12);
    }

    #[test]
    fn kalman_od_recovers_reference() {
        let problem = linear2(Linear2Variant::Od);
        let g = problem.jacobian.as_ref().unwrap()(&DVector::zeros(2)).unwrap();
        let hp = HyperParams::for_problem(&problem, 1.0, DVector::zeros(2), 0.25).unwrap();
        let mut s = GaussianState::isotropic(DVector::zeros(2), 0.25);
        for _ in 0..30 {
            s = kalman_step(&s, &g, &problem.y_obs, &hp).unwrap();
        }
        let expect = DVector::from_vec(vec![1.0 / 3.0, 17.0 / 12.0]);
        assert!((s.mean - expect).norm() < 1e-6);
    }

    #[test]
    fn uki_equals_kalman_on_random_linear_problem() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = DMatrix::from_fn(3, 4, |_, _| rng.gen_range(-1.0..1.0));
        let y = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
        let problem = crate::problems::linear::from_matrix(
            g.clone(),
            y.clone(),
            DMatrix::identity(3, 3) * 0.04,
            None,
        );
        let hp = HyperParams::for_problem(&problem, 0.8, DVector::zeros(4), 0.6).unwrap();
        let mut su = GaussianState::isotropic(DVector::zeros(4), 0.6);
        let mut sk = su.clone();
        for _ in 0..20 {
            su = uki_step(&su, &problem, &hp).unwrap();
            sk = kalman_step(&sk, &g, &y, &hp).unwrap();
            assert!((su.mean.clone() - &sk.mean).norm() < 1e-10);
            assert!((su.cov.clone() - &sk.cov).norm() < 1e-10);
        }
    }

    #[test]
    fn eki_fixed_seed_is_bit_identical() {
        let problem = linear2(Linear2Variant::Ns);
        let hp = HyperParams::for_problem(&problem, 1.0, DVector::zeros(2), 0.25).unwrap();
        let run_once = || {
            let ens = Ensemble::sample(&DVector::zeros(2), &(DMatrix::identity(2, 2) * 0.25), 7, 99)
                .unwrap();
            let mut rng = ens.step_rng();
            let mut e = ens;
            for _ in 0..5 {
                e = eki_step(&e, &problem, &hp, &mut rng).unwrap();
            }
            e
        };
        let a = run_once();
        let b = run_once();
        assert_eq!(a, b);
    }

    #[test]
    fn eki_large_ensemble_matches_uki_mean() {
        let problem = linear2(Linear2Variant::Ns);
        let hp = HyperParams::for_problem(&problem, 1.0, DVector::zeros(2), 0.25).unwrap();
        let s0 = GaussianState::isotropic(DVector::zeros(2), 0.25);
        let u1 = uki_step(&s0, &problem, &hp).unwrap();

        let j = 20_000;
        let ens = Ensemble::sample(&s0.mean, &s0.cov, j, 5).unwrap();
        let mut rng = ens.step_rng();
        let e1 = eki_step(&ens, &problem, &hp, &mut rng).unwrap();
        let se = e1.covariance().diagonal().map(|v| (v / j as f64).sqrt());
        let diff = e1.mean() - u1.mean;
        for i in 0..2 {
            assert!(
                diff[i].abs() < 5.0 * se[i],
                "component {i}: diff {} vs 5se {}",
                diff[i],
                5.0 * se[i]
            );
        }
    }

    #[test]
    fn eki_preserves_ensemble_subspace_without_noise() {
        use std::sync::Arc;
        // alpha = 1, Sigma_omega ~ 0: updates stay in the span of the initial
        // deviations around the moving mean
        let g = DMatrix::from_fn(4, 5, |i, j| ((i * 5 + j) as f64 * 0.13).sin());
        let y = DVector::from_element(4, 1.0);
        let problem = crate::problems::linear::from_matrix(
            g,
            y,
            DMatrix::identity(4, 4) * 0.01,
            None,
        );
        let mut hp = HyperParams::for_problem(&problem, 1.0, DVector::zeros(5), 1.0).unwrap();
        hp.sigma_omega = DMatrix::zeros(5, 5);
        let _ = Arc::clone(&problem.forward);

        let ens = Ensemble::sample(&DVector::zeros(5), &DMatrix::identity(5, 5), 3, 17).unwrap();
        let m0 = ens.mean();
        let basis: Vec<DVector<f64>> = ens.particles.iter().map(|p| p - &m0).collect();
        let span = DMatrix::from_columns(&basis);
        let svd = span.svd(true, false);
        let u = svd.u.unwrap();
        let rank = svd.singular_values.iter().filter(|&&s| s > 1e-12).count();
        let ur = u.columns(0, rank).into_owned();

        let mut rng = ens.step_rng();
        let mut e = ens;
        for _ in 0..4 {
            e = eki_step(&e, &problem, &hp, &mut rng).unwrap();
        }
        let m = e.mean();
        for p in &e.particles {
            let d = p - &m;
            let residual = &d - &ur * (ur.transpose() * &d);
            assert!(residual.norm() < 1e-9, "deviation left the span");
        }
    }

    #[test]
    fn uki_is_affine_invariant_on_linear_problems() {
        use rand::Rng;
        use std::sync::Arc;
        // transformed problem *G(theta) = G(A^-1 (theta - b)) with *r0, *Sigma_omega,
        // run in transformed coordinates, must reproduce A m_n + b and A C_n A^T
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let base = linear2(Linear2Variant::Od);
        let alpha = 0.7;
        let gamma = 0.5;
        let hp = HyperParams::for_problem(&base, alpha, DVector::zeros(2), gamma).unwrap();

        let a = DMatrix::from_row_slice(2, 2, &[1.3, -0.4, 0.8, 2.1]);
        let b = DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0));
        let a_inv = a.clone().try_inverse().unwrap();

        let inner = Arc::clone(&base.forward);
        let (ai, bb) = (a_inv.clone(), b.clone());
        let transformed = InverseProblem {
            forward: Arc::new(move |theta: &DVector<f64>| inner(&(&ai * (theta - &bb)))),
            jacobian: None,
            ..base.clone()
        };
        let hp_t = HyperParams {
            r0: &a * &hp.r0 + &b,
            sigma_omega: &a * &hp.sigma_omega * a.transpose(),
            ..hp.clone()
        };

        let mut s = GaussianState::isotropic(DVector::zeros(2), gamma);
        let mut s_t = GaussianState::new(&a * &s.mean + &b, &a * &s.cov * a.transpose()).unwrap();
        for n in 0..10 {
            s = uki_step(&s, &base, &hp).unwrap();
            s_t = uki_step(&s_t, &transformed, &hp_t).unwrap();
            let mean_ref = &a * &s.mean + &b;
            let cov_ref = &a * &s.cov * a.transpose();
            assert!(
                (&s_t.mean - &mean_ref).norm() / mean_ref.norm().max(1.0) < 1e-8,
                "mean broke affine invariance at n={n}"
            );
            assert!(
                (&s_t.cov - &cov_ref).norm() / cov_ref.norm().max(1e-30) < 1e-8,
                "covariance broke affine invariance at n={n}"
            );
        }
    }

    #[test]
    fn ns_misfit_non_increasing_after_second_iteration() {
        let problem = linear2(Linear2Variant::Ns);
        let hp = HyperParams::for_problem(&problem, 1.0, DVector::zeros(2), 0.25).unwrap();
        let init = State::Gaussian(GaussianState::isotropic(DVector::zeros(2), 0.25));
        let out = run(Method::Uki, &problem, &hp, init, 30).unwrap();
        let misfits: Vec<f64> = out.history.iter().map(|r| r.misfit).collect();
        for w in misfits[1..].windows(2) {
            assert!(
                w[1] <= w[0] * (1.0 + 1e-9) + 1e-25,
                "misfit rose: {} -> {}",
                w[0],
                w[1]
            );
        }
    }

    #[test]
    fn run_rejects_zero_iterations() {
        let problem = scalar_problem();
        let hp = scalar_hp();
        let init = State::Gaussian(GaussianState::isotropic(DVector::zeros(1), 1.0));
        let err = run(Method::Uki, &problem, &hp, init, 0).unwrap_err();
        assert!(matches!(err.source, EngineError::InvalidIterations));
        assert!(err.history.is_empty());
    }

    #[test]
    fn run_single_iteration_single_record() {
        let problem = scalar_problem();
        let hp = scalar_hp();
        let init = State::Gaussian(GaussianState::isotropic(DVector::zeros(1), 1.0));
        let out = run(Method::Uki, &problem, &hp, init, 1).unwrap();
        assert_eq!(out.history.len(), 1);
        assert_eq!(out.history[0].iteration, 1);
    }

    #[test]
    fn run_scalar_param_error_halves() {
        let problem = scalar_problem();
        let hp = scalar_hp();
        let init = State::Gaussian(GaussianState::isotropic(DVector::zeros(1), 1.0));
        let out = run(Method::Uki, &problem, &hp, init, 20).unwrap();
        for w in out.history.windows(2) {
            let r = w[1].param_error.unwrap() / w[0].param_error.unwrap();
            assert!((r - 0.5).abs() < 1e-6, "ratio {r}");
        }
    }

    #[test]
    fn run_kf_without_jacobian_fails_fast() {
        let mut problem = scalar_problem();
        problem.jacobian = None;
        let hp = scalar_hp();
        let init = State::Gaussian(GaussianState::isotropic(DVector::zeros(1), 1.0));
        let err = run(Method::Kf, &problem, &hp, init, 3).unwrap_err();
        assert!(matches!(err.source, EngineError::JacobianUnavailable));
    }

    #[test]
    fn run_aborts_with_partial_history() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        use std::sync::Arc;
        let calls = Arc::new(AtomicUsize::new(0));
        let calls_c = Arc::clone(&calls);
        // fails on every evaluation after the 8th (2 iterations of 3 sigma
        // points + misfit evaluations)
        let problem = InverseProblem {
            n_theta: 1,
            n_y: 1,
            forward: Arc::new(move |t: &DVector<f64>| {
                let k = calls_c.fetch_add(1, Ordering::SeqCst);
                if k >= 8 {
                    Err(ForwardError::NonFinite)
                } else {
                    Ok(t.clone())
                }
            }),
            jacobian: None,
            y_obs: DVector::from_vec(vec![1.0]),
            sigma_eta: DMatrix::identity(1, 1),
            theta_ref: None,
            field_error: None,
            theta_map: None,
        };
        let hp = scalar_hp();
        let init = State::Gaussian(GaussianState::isotropic(DVector::zeros(1), 1.0));
        let err = run(Method::Uki, &problem, &hp, init, 10).unwrap_err();
        assert_eq!(err.history.len(), err.iteration - 1);
        assert!(matches!(
            err.source,
            EngineError::ForwardModelFailure { .. }
        ));
    }
}
