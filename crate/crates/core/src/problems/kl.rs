//! Truncated Karhunen-Loeve expansion of a centred Gaussian random field on
//! [0,1]^2 with covariance `(-Laplacian + tau^2)^-d` under homogeneous
//! Neumann conditions.

use nalgebra::{DMatrix, DVector};

/// Largest lattice coordinate enumerated when ranking modes. 33^2 - 1 = 1088
/// modes, comfortably above the 256 used for truth fields.
const LATTICE_MAX: i64 = 32;

/// Modes of the 2-D KL expansion, ranked by descending eigenvalue with a
/// lexicographic tie-break, so the ordering is reproducible across runs.
#[derive(Debug, Clone)]
pub struct KlField2d {
    pub tau: f64,
    pub d: f64,
    pub n_modes: usize,
    /// `(l1, l2, sqrt(lambda))` per retained mode, strongest first.
    pub modes: Vec<(i64, i64, f64)>,
}

impl KlField2d {
    /// Standard field of the Darcy benchmark: `tau = 3`, `d = 2`.
    pub fn standard(n_modes: usize) -> Self {
        Self::new(3.0, 2.0, n_modes)
    }

    pub fn new(tau: f64, d: f64, n_modes: usize) -> Self {
        assert!(n_modes < (LATTICE_MAX as usize + 1).pow(2));
        let mut all: Vec<(i64, i64, f64)> = Vec::new();
        for l1 in 0..=LATTICE_MAX {
            for l2 in 0..=LATTICE_MAX {
                if l1 == 0 && l2 == 0 {
                    continue;
                }
                all.push((l1, l2, eigenvalue(tau, d, l1, l2)));
            }
        }
        all.sort_by(|a, b| {
            b.2.partial_cmp(&a.2)
                .unwrap()
                .then(a.0.cmp(&b.0))
                .then(a.1.cmp(&b.1))
        });
        all.truncate(n_modes);
        let modes = all
            .into_iter()
            .map(|(l1, l2, lam)| (l1, l2, lam.sqrt()))
            .collect();
        Self {
            tau,
            d,
            n_modes,
            modes,
        }
    }

    /// `log a(x; theta) = sum_k theta_k sqrt(lambda_k) psi_k(x)` truncated to
    /// `min(theta.len(), n_modes)` terms.
    pub fn log_field_at(&self, theta: &DVector<f64>, x1: f64, x2: f64) -> f64 {
        let mut acc = 0.0;
        for (k, &(l1, l2, sqrt_lam)) in self.modes.iter().enumerate().take(theta.len()) {
            acc += theta[k] * sqrt_lam * eigenfunction(l1, l2, x1, x2);
        }
        acc
    }

    /// Nodal values of `log a` on the `(n+1) x (n+1)` grid of a mesh with `n`
    /// intervals; entry `(i, j)` corresponds to `x = (i/n, j/n)`.
    pub fn log_field_on_grid(&self, theta: &DVector<f64>, grid_n: usize) -> DMatrix<f64> {
        let h = 1.0 / grid_n as f64;
        DMatrix::from_fn(grid_n + 1, grid_n + 1, |i, j| {
            self.log_field_at(theta, i as f64 * h, j as f64 * h)
        })
    }
}

pub fn eigenvalue(tau: f64, d: f64, l1: i64, l2: i64) -> f64 {
    let pi2 = std::f64::consts::PI * std::f64::consts::PI;
    let l_sq = (l1 * l1 + l2 * l2) as f64;
    (pi2 * l_sq + tau * tau).powf(-d)
}

pub fn eigenfunction(l1: i64, l2: i64, x1: f64, x2: f64) -> f64 {
    use std::f64::consts::PI;
    match (l1, l2) {
        (_, 0) => 2f64.sqrt() * (PI * l1 as f64 * x1).cos(),
        (0, _) => 2f64.sqrt() * (PI * l2 as f64 * x2).cos(),
        _ => 2.0 * (PI * l1 as f64 * x1).cos() * (PI * l2 as f64 * x2).cos(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigenvalue_of_first_mode() {
        // (pi^2 + 9)^-2
        let lam = eigenvalue(3.0, 2.0, 1, 0);
        assert!((lam - 2.809e-3).abs() < 1e-5, "lambda_(1,0) = {lam}");
    }

    #[test]
    fn eigenvalues_sorted_descending_and_positive() {
        let field = KlField2d::standard(64);
        let lams: Vec<f64> = field.modes.iter().map(|m| m.2 * m.2).collect();
        assert!(lams.iter().all(|&l| l > 0.0));
        assert!(lams.windows(2).all(|w| w[0] >= w[1]));
        // first four modes are (0,1)/(1,0) then (1,1)
        assert_eq!((field.modes[0].0, field.modes[0].1), (0, 1));
        assert_eq!((field.modes[1].0, field.modes[1].1), (1, 0));
        assert_eq!((field.modes[2].0, field.modes[2].1), (1, 1));
    }

    #[test]
    fn grid_orthonormality_first_32_modes() {
        // trapezoidal inner products on an 80-interval grid
        let field = KlField2d::standard(32);
        let n = 80usize;
        let h = 1.0 / n as f64;
        let weight = |i: usize| if i == 0 || i == n { 0.5 } else { 1.0 };
        let vals: Vec<DMatrix<f64>> = field
            .modes
            .iter()
            .map(|&(l1, l2, _)| {
                DMatrix::from_fn(n + 1, n + 1, |i, j| {
                    eigenfunction(l1, l2, i as f64 * h, j as f64 * h)
                })
            })
            .collect();
        for k in 0..32 {
            for l in k..32 {
                let mut ip = 0.0;
                for i in 0..=n {
                    for j in 0..=n {
                        ip += weight(i) * weight(j) * vals[k][(i, j)] * vals[l][(i, j)];
                    }
                }
                ip *= h * h;
                let expect = if k == l { 1.0 } else { 0.0 };
                assert!(
                    (ip - expect).abs() < 5e-3,
                    "<psi_{k}, psi_{l}> = {ip}, expected {expect}"
                );
            }
        }
    }
}
