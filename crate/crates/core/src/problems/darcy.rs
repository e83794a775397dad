//! Darcy flow benchmark: recover Karhunen-Loeve coefficients of a
//! log-permeability field from pointwise pressure measurements.
//!
//! Forward map: theta -> log a via the truncated KL expansion -> 5-point
//! finite-difference solve of -div(a grad p) = f with p = 0 on the boundary
//! -> pressure sampled at the 49 interior lattice points (i/8, j/8).

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::kl::KlField2d;
use super::{ForwardError, InverseProblem};

#[derive(Debug, Clone, Copy)]
pub struct DarcyConfig {
    /// Number of mesh intervals per direction; nodes are (grid_n+1)^2.
    pub grid_n: usize,
    /// KL modes used to draw the truth field.
    pub n_modes_truth: usize,
    /// KL modes exposed to the inversion.
    pub n_theta: usize,
}

/// Piecewise-constant source, a function of x2 only.
fn source(x2: f64) -> f64 {
    if x2 <= 4.0 / 6.0 {
        1000.0
    } else if x2 <= 5.0 / 6.0 {
        2000.0
    } else {
        3000.0
    }
}

/// Solves -div(a grad p) = f on the unit square by conjugate gradients on the
/// 5-point stencil with arithmetic-mean face coefficients. `log_a` holds nodal
/// values on the (n+1)x(n+1) grid. Returns interior nodal pressures as a
/// (n-1)x(n-1) matrix; fails if the relative residual cannot reach 1e-10.
fn solve_pressure(log_a: &DMatrix<f64>, grid_n: usize) -> Result<DMatrix<f64>, ForwardError> {
    let n = grid_n;
    let m = n - 1; // interior nodes per direction
    let h = 1.0 / n as f64;
    let a = log_a.map(|v| v.exp());
    if !a.iter().all(|v| v.is_finite()) {
        return Err(ForwardError::NonFinite);
    }

    // Face coefficients between node (i,j) and its +x / +y neighbors,
    // for all nodes 0..n in each direction.
    let face_x = DMatrix::from_fn(n, n + 1, |i, j| 0.5 * (a[(i, j)] + a[(i + 1, j)]));
    let face_y = DMatrix::from_fn(n + 1, n, |i, j| 0.5 * (a[(i, j)] + a[(i, j + 1)]));

    let idx = |i: usize, j: usize| (i - 1) * m + (j - 1);
    let apply = |p: &DVector<f64>, out: &mut DVector<f64>| {
        for i in 1..n {
            for j in 1..n {
                let c = p[idx(i, j)];
                let west = if i > 1 { p[idx(i - 1, j)] } else { 0.0 };
                let east = if i < n - 1 { p[idx(i + 1, j)] } else { 0.0 };
                let south = if j > 1 { p[idx(i, j - 1)] } else { 0.0 };
                let north = if j < n - 1 { p[idx(i, j + 1)] } else { 0.0 };
                let v = face_x[(i - 1, j)] * (c - west)
                    + face_x[(i, j)] * (c - east)
                    + face_y[(i, j - 1)] * (c - south)
                    + face_y[(i, j)] * (c - north);
                out[idx(i, j)] = v / (h * h);
            }
        }
    };

    let b = DVector::from_fn(m * m, |k, _| {
        let j = k % m + 1;
        source(j as f64 * h)
    });
    let b_norm = b.norm();

    // Jacobi-preconditioned CG
    let diag = {
        let mut d = DVector::zeros(m * m);
        for i in 1..n {
            for j in 1..n {
                d[idx(i, j)] = (face_x[(i - 1, j)]
                    + face_x[(i, j)]
                    + face_y[(i, j - 1)]
                    + face_y[(i, j)])
                    / (h * h);
            }
        }
        d
    };
    let mut p_sol = DVector::zeros(m * m);
    let mut r = b.clone();
    let mut z = r.component_div(&diag);
    let mut d = z.clone();
    let mut rz = r.dot(&z);
    let mut ad = DVector::zeros(m * m);
    let tol = 1e-12 * b_norm;
    let max_iter = 20 * m * m;
    let mut it = 0;
    while r.norm() > tol && it < max_iter {
        apply(&d, &mut ad);
        let alpha = rz / d.dot(&ad);
        p_sol.axpy(alpha, &d, 1.0);
        r.axpy(-alpha, &ad, 1.0);
        z = r.component_div(&diag);
        let rz_new = r.dot(&z);
        let beta = rz_new / rz;
        rz = rz_new;
        d = &z + &d * beta;
        it += 1;
    }
    let residual = r.norm() / b_norm;
    if residual > 1e-10 {
        return Err(ForwardError::SolveFailure { residual });
    }
    Ok(DMatrix::from_fn(m, m, |i, j| p_sol[i * m + j]))
}

/// Full pressure field including boundary zeros, for diagnostics and tests.
pub fn pressure_field(log_a: &DMatrix<f64>, grid_n: usize) -> Result<DMatrix<f64>, ForwardError> {
    let interior = solve_pressure(log_a, grid_n)?;
    let mut full = DMatrix::zeros(grid_n + 1, grid_n + 1);
    for i in 1..grid_n {
        for j in 1..grid_n {
            full[(i, j)] = interior[(i - 1, j - 1)];
        }
    }
    Ok(full)
}

/// Pressure sampled at the 7x7 interior lattice (i/8, j/8), row-major in i.
fn observe(pressure_interior: &DMatrix<f64>, grid_n: usize) -> Result<DVector<f64>, ForwardError> {
    debug_assert!(grid_n % 8 == 0);
    let stride = grid_n / 8;
    let mut out = DVector::zeros(49);
    for i in 1..=7 {
        for j in 1..=7 {
            out[(i - 1) * 7 + (j - 1)] = pressure_interior[(i * stride - 1, j * stride - 1)];
        }
    }
    if out.iter().all(|v| v.is_finite()) {
        Ok(out)
    } else {
        Err(ForwardError::NonFinite)
    }
}

/// Builds the Darcy benchmark. The truth field is drawn as
/// `theta ~ N(0, I)` in `R^{n_modes_truth}` from the seed; the inversion sees
/// only the first `n_theta` KL modes. `Sigma_eta = I`.
pub fn darcy2d(
    grid_n: usize,
    n_modes_truth: usize,
    n_theta: usize,
    seed: u64,
) -> Result<InverseProblem, ForwardError> {
    assert!(grid_n >= 16, "grid must have at least 16 intervals");
    assert!(grid_n % 8 == 0, "observation lattice needs grid_n % 8 == 0");
    assert!(n_theta <= n_modes_truth);
    let config = DarcyConfig {
        grid_n,
        n_modes_truth,
        n_theta,
    };

    let field = Arc::new(KlField2d::standard(n_modes_truth));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta_truth = DVector::from_fn(n_modes_truth, |_, _| StandardNormal.sample(&mut rng));

    let log_a_truth = field.log_field_on_grid(&theta_truth, grid_n);
    let truth_norm = log_a_truth.norm();
    let y_ref = observe(&solve_pressure(&log_a_truth, grid_n)?, grid_n)?;

    let field_fwd = Arc::clone(&field);
    let forward = Arc::new(move |theta: &DVector<f64>| {
        let log_a = field_fwd.log_field_on_grid(theta, config.grid_n);
        observe(&solve_pressure(&log_a, config.grid_n)?, config.grid_n)
    });

    // relative L2 error of the reconstructed log-permeability on the grid
    let field_err = Arc::clone(&field);
    let log_a_ref = log_a_truth.clone();
    let field_error = Arc::new(move |theta: &DVector<f64>| {
        let log_a = field_err.log_field_on_grid(theta, config.grid_n);
        (log_a - &log_a_ref).norm() / truth_norm
    });

    Ok(InverseProblem {
        n_theta,
        n_y: 49,
        forward,
        jacobian: None,
        y_obs: y_ref,
        sigma_eta: DMatrix::identity(49, 49),
        theta_ref: Some(theta_truth.rows(0, n_theta).into_owned()),
        field_error: Some(field_error),
        theta_map: None,
    })
}
