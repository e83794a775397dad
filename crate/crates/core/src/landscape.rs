//! Gaussian-smoothed landscape probe for scalar maps.
//!
//! For a rough map `g` (for example a chaotic time average), the quantities
//!
//! ```text
//! FG(r)  = E[g(x)]                 x ~ N(r, sigma_r^2)
//! FdG(r) = Cov[g(x), x] / sigma_r^2
//! ```
//!
//! describe the landscape as perceived by the unscented engines: `FdG` stays
//! bounded where a raw finite-difference derivative of `g` blows up.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

use crate::problems::ForwardError;

#[derive(Debug, Error)]
pub enum LandscapeError {
    #[error("forward value non-finite at x = {x}")]
    NonFiniteForwardValue { x: f64 },
    #[error("forward map failed at x = {x}: {source}")]
    Forward { x: f64, source: ForwardError },
}

#[derive(Debug, Clone, Copy)]
pub struct LandscapePoint {
    pub r: f64,
    /// Smoothed map value `FG(r)`.
    pub fg: f64,
    /// Smoothed gradient `FdG(r)`.
    pub fdg: f64,
}

/// Gauss-Hermite rule for `N(0,1)` expectations: `E[f(Z)] ~ sum w_i f(z_i)`.
///
/// Nodes and weights come from the symmetric tridiagonal Jacobi matrix of the
/// Hermite recurrence (Golub-Welsch); weights sum to one.
pub fn gauss_hermite(order: usize) -> (DVector<f64>, DVector<f64>) {
    assert!(order >= 1);
    let mut jacobi = DMatrix::zeros(order, order);
    for k in 1..order {
        let b = (k as f64 / 2.0).sqrt();
        jacobi[(k - 1, k)] = b;
        jacobi[(k, k - 1)] = b;
    }
    let eig = jacobi.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..order)
        .map(|i| {
            let t = eig.eigenvalues[i];
            let w = eig.eigenvectors[(0, i)].powi(2);
            // physicists' node t -> probabilists' node sqrt(2) t
            (std::f64::consts::SQRT_2 * t, w)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let nodes = DVector::from_iterator(order, pairs.iter().map(|p| p.0));
    let weights = DVector::from_iterator(order, pairs.iter().map(|p| p.1));
    (nodes, weights)
}

/// Evaluates `(FG, FdG)` on a grid of centres by Gauss-Hermite quadrature of
/// the given order. Grid points are independent and run in parallel.
pub fn averaged_landscape_1d<F>(
    g: F,
    r_grid: &[f64],
    sigma_r: f64,
    quad_order: usize,
) -> Result<Vec<LandscapePoint>, LandscapeError>
where
    F: Fn(f64) -> Result<f64, ForwardError> + Sync,
{
    assert!(sigma_r > 0.0, "sigma_r must be positive");
    assert!(quad_order >= 8, "quadrature order must be at least 8");
    let (nodes, weights) = gauss_hermite(quad_order);

    let eval = |x: f64| -> Result<f64, LandscapeError> {
        let v = g(x).map_err(|source| LandscapeError::Forward { x, source })?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(LandscapeError::NonFiniteForwardValue { x })
        }
    };

    r_grid
        .par_iter()
        .map(|&r| {
            let g_center = eval(r)?;
            let mut fg = 0.0;
            let mut num = 0.0;
            let mut den = 0.0;
            for (z, w) in nodes.iter().zip(weights.iter()) {
                let dx = sigma_r * z;
                let gx = eval(r + dx)?;
                fg += w * gx;
                num += w * dx * (gx - g_center);
                den += w * dx * dx;
            }
            Ok(LandscapePoint {
                r,
                fg,
                fdg: num / den,
            })
        })
        .collect()
}
