//! Multiscale Lorenz96 closure learning.
//!
//! Truth data comes from the full two-scale system; the forward model is the
//! reduced slow system with a cubic-Hermite closure psi(X) whose nodal values
//! and slopes are the unknowns. Observations are time averages of the first
//! and second moments of the first few slow variables.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{ForwardError, InverseProblem};

const BLOWUP_NORM: f64 = 1e6;

#[derive(Debug, Clone, Copy)]
pub struct Lorenz96Config {
    /// Slow variables.
    pub k: usize,
    /// Fast variables per slow variable.
    pub j: usize,
    pub forcing: f64,
    pub c: f64,
    pub b: f64,
    /// Coupling strength h.
    pub h_couple: f64,
    pub dt: f64,
    pub spin_up: f64,
    /// Averaging window for the truth observation.
    pub truth_window: f64,
    /// Averaging window used inside the forward model.
    pub forward_window: f64,
    /// Moments of X^(1..n_obs_vars) are observed.
    pub n_obs_vars: usize,
    /// Closure domain; X is clamped into it for closure evaluation.
    pub domain: (f64, f64),
    /// Cubic Hermite elements over the domain (n_theta = 2 * (elements + 1)).
    pub n_elements: usize,
}

impl Default for Lorenz96Config {
    fn default() -> Self {
        Self {
            k: 8,
            j: 32,
            forcing: 20.0,
            c: 10.0,
            b: 10.0,
            h_couple: 1.0,
            dt: 5e-3,
            spin_up: 30.0,
            truth_window: 1000.0,
            forward_window: 1000.0,
            n_obs_vars: 4,
            domain: (-20.0, 20.0),
            n_elements: 5,
        }
    }
}

impl Lorenz96Config {
    pub fn n_theta(&self) -> usize {
        2 * (self.n_elements + 1)
    }

    pub fn n_y(&self) -> usize {
        2 * self.n_obs_vars
    }
}

/// Cubic Hermite interpolant over uniform elements; degrees of freedom are
/// laid out as [value_0, slope_0, value_1, slope_1, ...]. The argument is
/// clamped into the domain.
pub fn hermite_closure(theta: &DVector<f64>, x: f64, domain: (f64, f64), n_elements: usize) -> f64 {
    let (lo, hi) = domain;
    let x = x.clamp(lo, hi);
    let width = (hi - lo) / n_elements as f64;
    let e = (((x - lo) / width).floor() as usize).min(n_elements - 1);
    let s = (x - (lo + e as f64 * width)) / width;
    let s2 = s * s;
    let s3 = s2 * s;
    let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
    let h10 = s3 - 2.0 * s2 + s;
    let h01 = -2.0 * s3 + 3.0 * s2;
    let h11 = s3 - s2;
    let v0 = theta[2 * e];
    let d0 = theta[2 * e + 1];
    let v1 = theta[2 * e + 2];
    let d1 = theta[2 * e + 3];
    h00 * v0 + h10 * width * d0 + h01 * v1 + h11 * width * d1
}

/// Full system right-hand side. Slow variables occupy `state[0..k]`; the fast
/// variables form a single ring of length `j * k` in `state[k..]`, so the
/// cyclic conditions `Y^(j+J,k) = Y^(j,k+1)` and `Y^(j,k+K) = Y^(j,k)` are
/// plain index arithmetic modulo `j * k`.
pub fn full_rhs(cfg: &Lorenz96Config, state: &[f64], out: &mut [f64]) {
    let k = cfg.k;
    let jk = cfg.j * k;
    let (xs, ys) = state.split_at(k);
    let hcb = cfg.h_couple * cfg.c / cfg.b;
    for i in 0..k {
        let im1 = (i + k - 1) % k;
        let im2 = (i + k - 2) % k;
        let ip1 = (i + 1) % k;
        let mut coupling = 0.0;
        for jj in 0..cfg.j {
            coupling += ys[i * cfg.j + jj];
        }
        out[i] = -xs[im1] * (xs[im2] - xs[ip1]) - xs[i] + cfg.forcing - hcb * coupling;
    }
    for g in 0..jk {
        let gp1 = (g + 1) % jk;
        let gp2 = (g + 2) % jk;
        let gm1 = (g + jk - 1) % jk;
        let x_parent = xs[g / cfg.j];
        out[k + g] =
            -cfg.c * cfg.b * ys[gp1] * (ys[gp2] - ys[gm1]) - cfg.c * ys[g] + hcb * x_parent;
    }
}

/// Reduced system with the learned closure.
pub fn reduced_rhs(cfg: &Lorenz96Config, theta: &DVector<f64>, xs: &[f64], out: &mut [f64]) {
    let k = cfg.k;
    for i in 0..k {
        let im1 = (i + k - 1) % k;
        let im2 = (i + k - 2) % k;
        let ip1 = (i + 1) % k;
        out[i] = -xs[im1] * (xs[im2] - xs[ip1]) - xs[i]
            + cfg.forcing
            + hermite_closure(theta, xs[i], cfg.domain, cfg.n_elements);
    }
}

fn rk4<F: FnMut(&[f64], &mut [f64])>(state: &mut [f64], dt: f64, mut f: F, work: &mut Rk4Work) {
    let n = state.len();
    let Rk4Work { k1, k2, k3, k4, tmp } = work;
    f(state, k1);
    for i in 0..n {
        tmp[i] = state[i] + 0.5 * dt * k1[i];
    }
    f(tmp, k2);
    for i in 0..n {
        tmp[i] = state[i] + 0.5 * dt * k2[i];
    }
    f(tmp, k3);
    for i in 0..n {
        tmp[i] = state[i] + dt * k3[i];
    }
    f(tmp, k4);
    for i in 0..n {
        state[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
}

struct Rk4Work {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4Work {
    fn new(n: usize) -> Self {
        Self {
            k1: vec![0.0; n],
            k2: vec![0.0; n],
            k3: vec![0.0; n],
            k4: vec![0.0; n],
            tmp: vec![0.0; n],
        }
    }
}

fn check_blowup(state: &[f64]) -> Result<(), ForwardError> {
    let norm = state.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !norm.is_finite() || norm > BLOWUP_NORM {
        Err(ForwardError::TrajectoryBlowup { norm })
    } else {
        Ok(())
    }
}

/// Moment accumulator for [X_1..X_m, X_1^2..X_m^2].
fn accumulate_moments(xs: &[f64], m: usize, acc: &mut DVector<f64>) {
    for i in 0..m {
        acc[i] += xs[i];
        acc[m + i] += xs[i] * xs[i];
    }
}

/// Time-averaged moments of the full two-scale system.
fn truth_observation(cfg: &Lorenz96Config, rng: &mut ChaCha8Rng) -> Result<DVector<f64>, ForwardError> {
    let n = cfg.k + cfg.j * cfg.k;
    let mut state = vec![0.0; n];
    for v in state.iter_mut().take(cfg.k) {
        *v = StandardNormal.sample(rng);
    }
    for v in state.iter_mut().skip(cfg.k) {
        let z: f64 = StandardNormal.sample(rng);
        *v = 0.01 * z;
    }
    let mut work = Rk4Work::new(n);
    let n_spin = (cfg.spin_up / cfg.dt).round() as usize;
    let n_win = (cfg.truth_window / cfg.dt).round() as usize;
    for _ in 0..n_spin {
        rk4(&mut state, cfg.dt, |s, o| full_rhs(cfg, s, o), &mut work);
        check_blowup(&state)?;
    }
    let mut acc = DVector::zeros(cfg.n_y());
    for _ in 0..n_win {
        rk4(&mut state, cfg.dt, |s, o| full_rhs(cfg, s, o), &mut work);
        check_blowup(&state)?;
        accumulate_moments(&state[..cfg.k], cfg.n_obs_vars, &mut acc);
    }
    Ok(acc / n_win as f64)
}

fn reduced_observation(
    cfg: &Lorenz96Config,
    theta: &DVector<f64>,
    x0: &[f64],
) -> Result<DVector<f64>, ForwardError> {
    let mut state = x0.to_vec();
    let mut work = Rk4Work::new(cfg.k);
    let n_spin = (cfg.spin_up / cfg.dt).round() as usize;
    let n_win = (cfg.forward_window / cfg.dt).round() as usize;
    for _ in 0..n_spin {
        rk4(&mut state, cfg.dt, |s, o| reduced_rhs(cfg, theta, s, o), &mut work);
        check_blowup(&state)?;
    }
    let mut acc = DVector::zeros(cfg.n_y());
    for _ in 0..n_win {
        rk4(&mut state, cfg.dt, |s, o| reduced_rhs(cfg, theta, s, o), &mut work);
        check_blowup(&state)?;
        accumulate_moments(&state[..cfg.k], cfg.n_obs_vars, &mut acc);
    }
    Ok(acc / n_win as f64)
}

/// `Sigma_eta = diag(0.05^2 y .* y)`.
pub fn sigma_eta_from_obs(y_obs: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_diagonal(&y_obs.map(|v| 0.0025 * v * v))
}

pub fn lorenz96_multiscale(seed: u64) -> Result<InverseProblem, ForwardError> {
    lorenz96_with_config(seed, Lorenz96Config::default())
}

pub fn lorenz96_with_config(
    seed: u64,
    cfg: Lorenz96Config,
) -> Result<InverseProblem, ForwardError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y_ref = truth_observation(&cfg, &mut rng)?;
    // forward runs start from a separate random initialization
    let mut x0 = vec![0.0; cfg.k];
    for v in x0.iter_mut() {
        *v = StandardNormal.sample(&mut rng);
    }
    let sigma_eta = sigma_eta_from_obs(&y_ref);
    let fwd_cfg = cfg;
    let fwd_x0 = x0;
    let forward = Arc::new(move |theta: &DVector<f64>| reduced_observation(&fwd_cfg, theta, &fwd_x0));
    Ok(InverseProblem {
        n_theta: cfg.n_theta(),
        n_y: cfg.n_y(),
        forward,
        jacobian: None,
        y_obs: y_ref,
        sigma_eta,
        theta_ref: None,
        field_error: None,
        theta_map: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_parameters_match_benchmark() {
        let cfg = Lorenz96Config::default();
        assert_eq!((cfg.k, cfg.j), (8, 32));
        assert_eq!((cfg.forcing, cfg.c, cfg.b, cfg.h_couple), (20.0, 10.0, 10.0, 1.0));
        assert_eq!(cfg.n_theta(), 12);
        assert_eq!(cfg.n_y(), 8);
    }

    #[test]
    fn zero_closure_recovers_single_scale_dynamics() {
        let cfg = Lorenz96Config::default();
        let theta = DVector::zeros(cfg.n_theta());
        let xs = [1.0, -0.5, 2.0, 0.3, -1.2, 0.9, 1.4, -2.1];
        let mut out = [0.0; 8];
        reduced_rhs(&cfg, &theta, &xs, &mut out);
        for i in 0..8 {
            let im1 = (i + 8 - 1) % 8;
            let im2 = (i + 8 - 2) % 8;
            let ip1 = (i + 1) % 8;
            let expect = -xs[im1] * (xs[im2] - xs[ip1]) - xs[i] + cfg.forcing;
            assert!((out[i] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn full_rhs_is_rotation_equivariant() {
        // cyclic boundary handling: rotating X by one slot and Y by one block
        // must rotate the right-hand side the same way
        let cfg = Lorenz96Config {
            j: 4,
            ..Lorenz96Config::default()
        };
        let n = cfg.k + cfg.j * cfg.k;
        let state: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut rotated = vec![0.0; n];
        for i in 0..cfg.k {
            rotated[(i + 1) % cfg.k] = state[i];
        }
        for g in 0..cfg.j * cfg.k {
            rotated[cfg.k + (g + cfg.j) % (cfg.j * cfg.k)] = state[cfg.k + g];
        }
        let mut f = vec![0.0; n];
        let mut f_rot = vec![0.0; n];
        full_rhs(&cfg, &state, &mut f);
        full_rhs(&cfg, &rotated, &mut f_rot);
        for i in 0..cfg.k {
            assert!((f_rot[(i + 1) % cfg.k] - f[i]).abs() < 1e-12);
        }
        for g in 0..cfg.j * cfg.k {
            assert!((f_rot[cfg.k + (g + cfg.j) % (cfg.j * cfg.k)] - f[cfg.k + g]).abs() < 1e-12);
        }
    }

    #[test]
    fn hermite_closure_interpolates_nodes() {
        let cfg = Lorenz96Config::default();
        let mut theta = DVector::zeros(cfg.n_theta());
        for e in 0..=cfg.n_elements {
            theta[2 * e] = (e as f64).powi(2); // nodal values
            theta[2 * e + 1] = 0.5; // nodal slopes
        }
        for e in 0..=cfg.n_elements {
            let x = -20.0 + 8.0 * e as f64;
            let v = hermite_closure(&theta, x, cfg.domain, cfg.n_elements);
            assert!((v - (e as f64).powi(2)).abs() < 1e-12);
        }
        // clamped outside the domain
        let v_lo = hermite_closure(&theta, -50.0, cfg.domain, cfg.n_elements);
        assert!((v_lo - theta[0]).abs() < 1e-12);
    }

    #[test]
    fn hermite_closure_reproduces_slopes() {
        let cfg = Lorenz96Config::default();
        // linear function x/4: values x_i/4, slopes 1/4 -> exact reproduction
        let mut theta = DVector::zeros(cfg.n_theta());
        for e in 0..=cfg.n_elements {
            let x = -20.0 + 8.0 * e as f64;
            theta[2 * e] = x / 4.0;
            theta[2 * e + 1] = 0.25;
        }
        for x in [-19.0, -7.3, 0.0, 3.9, 16.2] {
            let v = hermite_closure(&theta, x, cfg.domain, cfg.n_elements);
            assert!((v - x / 4.0).abs() < 1e-12, "x={x} v={v}");
        }
    }

    #[test]
    fn truth_generation_is_deterministic() {
        let cfg = Lorenz96Config {
            truth_window: 5.0,
            spin_up: 2.0,
            ..Lorenz96Config::default()
        };
        let a = lorenz96_with_config(3, cfg).unwrap();
        let b = lorenz96_with_config(3, cfg).unwrap();
        assert_eq!(a.y_obs, b.y_obs);
        assert_eq!(a.sigma_eta.diagonal(), sigma_eta_from_obs(&a.y_obs).diagonal());
    }
}
