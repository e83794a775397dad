//! Lorenz63 parameter estimation from time-averaged moments.
//!
//! Observations are finite-time averages treated as noisy evaluations of the
//! ergodic average; the observation-error covariance is estimated from the
//! spread of window averages of a long truth run.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{constrain, ConstraintTransform, ForwardError, InverseProblem};

const BLOWUP_NORM: f64 = 1e6;
const TRUTH_PARAMS: (f64, f64, f64) = (10.0, 28.0, 8.0 / 3.0);

/// A time-averaged observable: a plain coordinate or its square.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Moment {
    First(usize),
    Second(usize),
}

impl Moment {
    fn eval(&self, x: &[f64; 3]) -> f64 {
        match *self {
            Moment::First(i) => x[i],
            Moment::Second(i) => x[i] * x[i],
        }
    }
}

/// Spin-up, averaging window, integrator step, and the moment list defining
/// the observation operator.
#[derive(Debug, Clone)]
pub struct TimeAverageSpec {
    pub spin_up: f64,
    pub window: f64,
    pub dt: f64,
    pub moments: Vec<Moment>,
}

impl TimeAverageSpec {
    fn standard(moments: Vec<Moment>) -> Self {
        Self {
            spin_up: 30.0,
            window: 20.0,
            dt: 0.01,
            moments,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lorenz63Variant {
    /// theta = r; y = time-average of x3; sigma and beta held at truth.
    OneParam,
    /// theta = (sigma, r, beta) through the modulus transform; y = first and
    /// second moments of all three coordinates.
    ThreeParam,
}

fn rhs(p: (f64, f64, f64), x: &[f64; 3]) -> [f64; 3] {
    let (s, r, b) = p;
    [
        s * (x[1] - x[0]),
        x[0] * (r - x[2]) - x[1],
        x[0] * x[1] - b * x[2],
    ]
}

fn rk4_step(p: (f64, f64, f64), x: &mut [f64; 3], dt: f64) {
    let k1 = rhs(p, x);
    let x2 = [
        x[0] + 0.5 * dt * k1[0],
        x[1] + 0.5 * dt * k1[1],
        x[2] + 0.5 * dt * k1[2],
    ];
    let k2 = rhs(p, &x2);
    let x3 = [
        x[0] + 0.5 * dt * k2[0],
        x[1] + 0.5 * dt * k2[1],
        x[2] + 0.5 * dt * k2[2],
    ];
    let k3 = rhs(p, &x3);
    let x4 = [x[0] + dt * k3[0], x[1] + dt * k3[1], x[2] + dt * k3[2]];
    let k4 = rhs(p, &x4);
    for i in 0..3 {
        x[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
}

fn check_state(x: &[f64; 3]) -> Result<(), ForwardError> {
    let norm = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
    if !norm.is_finite() || norm > BLOWUP_NORM {
        Err(ForwardError::TrajectoryBlowup { norm })
    } else {
        Ok(())
    }
}

/// Integrates through the spin-up, then returns consecutive window averages
/// of the moment list.
fn window_averages(
    p: (f64, f64, f64),
    x0: [f64; 3],
    spec: &TimeAverageSpec,
    n_windows: usize,
) -> Result<Vec<DVector<f64>>, ForwardError> {
    let mut x = x0;
    let n_spin = (spec.spin_up / spec.dt).round() as usize;
    let n_win = (spec.window / spec.dt).round() as usize;
    for _ in 0..n_spin {
        rk4_step(p, &mut x, spec.dt);
        check_state(&x)?;
    }
    let mut out = Vec::with_capacity(n_windows);
    for _ in 0..n_windows {
        let mut acc = DVector::zeros(spec.moments.len());
        for _ in 0..n_win {
            rk4_step(p, &mut x, spec.dt);
            check_state(&x)?;
            for (k, m) in spec.moments.iter().enumerate() {
                acc[k] += m.eval(&x);
            }
        }
        out.push(acc / n_win as f64);
    }
    Ok(out)
}

/// One forward evaluation: a single window average after spin-up.
fn forward_average(
    p: (f64, f64, f64),
    x0: [f64; 3],
    spec: &TimeAverageSpec,
) -> Result<DVector<f64>, ForwardError> {
    Ok(window_averages(p, x0, spec, 1)?.pop().unwrap())
}

fn sample_covariance(samples: &[DVector<f64>]) -> DMatrix<f64> {
    let n = samples.len();
    let dim = samples[0].len();
    let mut mean = DVector::zeros(dim);
    for s in samples {
        mean += s;
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(dim, dim);
    for s in samples {
        let d = s - &mean;
        cov += &d * d.transpose();
    }
    cov / (n - 1) as f64
}

/// Builds a Lorenz63 problem; the seed fixes the initial condition shared by
/// truth generation and every forward evaluation.
pub fn lorenz63(variant: Lorenz63Variant, seed: u64) -> Result<InverseProblem, ForwardError> {
    lorenz63_with_windows(variant, seed, 200.0)
}

/// Same, with a configurable truth window (must be a multiple of the
/// averaging window so the error covariance can be estimated from the
/// window spread).
pub fn lorenz63_with_windows(
    variant: Lorenz63Variant,
    seed: u64,
    truth_window: f64,
) -> Result<InverseProblem, ForwardError> {
    let moments = match variant {
        Lorenz63Variant::OneParam => vec![Moment::First(2)],
        Lorenz63Variant::ThreeParam => vec![
            Moment::First(0),
            Moment::First(1),
            Moment::First(2),
            Moment::Second(0),
            Moment::Second(1),
            Moment::Second(2),
        ],
    };
    let spec = TimeAverageSpec::standard(moments);
    let n_y = spec.moments.len();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x0 = [0.0; 3];
    for v in x0.iter_mut() {
        *v = StandardNormal.sample(&mut rng);
    }

    let n_windows = (truth_window / spec.window).round() as usize;
    assert!(n_windows >= 2, "need at least two windows to estimate noise");
    let windows = window_averages(TRUTH_PARAMS, x0, &spec, n_windows)?;
    let mut y_ref = DVector::zeros(n_y);
    for w in &windows {
        y_ref += w;
    }
    y_ref /= n_windows as f64;
    let sigma_eta = sample_covariance(&windows);

    match variant {
        Lorenz63Variant::OneParam => {
            let fwd_spec = spec.clone();
            let forward = Arc::new(move |theta: &DVector<f64>| {
                forward_average((TRUTH_PARAMS.0, theta[0], TRUTH_PARAMS.2), x0, &fwd_spec)
            });
            Ok(InverseProblem {
                n_theta: 1,
                n_y,
                forward,
                jacobian: None,
                y_obs: y_ref,
                sigma_eta,
                theta_ref: Some(DVector::from_vec(vec![TRUTH_PARAMS.1])),
                field_error: None,
                theta_map: None,
            })
        }
        Lorenz63Variant::ThreeParam => {
            let fwd_spec = spec.clone();
            let forward = Arc::new(move |theta: &DVector<f64>| {
                forward_average((theta[0], theta[1], theta[2]), x0, &fwd_spec)
            });
            let base = InverseProblem {
                n_theta: 3,
                n_y,
                forward,
                jacobian: None,
                y_obs: y_ref,
                sigma_eta,
                theta_ref: Some(DVector::from_vec(vec![
                    TRUTH_PARAMS.0,
                    TRUTH_PARAMS.1,
                    TRUTH_PARAMS.2,
                ])),
                field_error: None,
                theta_map: None,
            };
            Ok(constrain(&base, ConstraintTransform::NonNegative))
        }
    }
}

/// Scalar landscape map `r -> time-averaged x3` used by the smoothing probe.
pub fn lorenz63_scalar_map(seed: u64) -> impl Fn(f64) -> Result<f64, ForwardError> + Send + Sync {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x0 = [0.0; 3];
    for v in x0.iter_mut() {
        *v = StandardNormal.sample(&mut rng);
    }
    let spec = TimeAverageSpec::standard(vec![Moment::First(2)]);
    move |r: f64| Ok(forward_average((TRUTH_PARAMS.0, r, TRUTH_PARAMS.2), x0, &spec)?[0])
}
