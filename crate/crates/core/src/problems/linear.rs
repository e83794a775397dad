//! Linear benchmark systems: the 2-parameter model problem and the Hilbert
//! matrix problem. Both are noiseless with a misspecified error model
//! `Sigma_eta = 0.1^2 I`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::InverseProblem;

/// The three 2-parameter scenarios: well-determined, over-determined,
/// under-determined.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Linear2Variant {
    Ns,
    Od,
    Ud,
}

/// Wraps a constant matrix as an [`InverseProblem`] with exact Jacobian.
pub fn from_matrix(
    g: DMatrix<f64>,
    y: DVector<f64>,
    sigma_eta: DMatrix<f64>,
    theta_ref: Option<DVector<f64>>,
) -> InverseProblem {
    let n_y = g.nrows();
    let n_theta = g.ncols();
    let g_fwd = g.clone();
    let g_jac = g;
    InverseProblem {
        n_theta,
        n_y,
        forward: Arc::new(move |theta: &DVector<f64>| Ok(&g_fwd * theta)),
        jacobian: Some(Arc::new(move |_theta: &DVector<f64>| Ok(g_jac.clone()))),
        y_obs: y,
        sigma_eta,
        theta_ref,
        field_error: None,
        theta_map: None,
    }
}

/// 2-parameter linear model problem.
pub fn linear2(variant: Linear2Variant) -> InverseProblem {
    let (g, y, theta_ref) = match variant {
        Linear2Variant::Ns => (
            DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]),
            DVector::from_vec(vec![3.0, 7.0]),
            DVector::from_vec(vec![1.0, 1.0]),
        ),
        Linear2Variant::Od => (
            DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
            DVector::from_vec(vec![3.0, 7.0, 10.0]),
            DVector::from_vec(vec![1.0 / 3.0, 17.0 / 12.0]),
        ),
        // minimal-norm representative of the solution family
        Linear2Variant::Ud => (
            DMatrix::from_row_slice(1, 2, &[1.0, 2.0]),
            DVector::from_vec(vec![3.0]),
            DVector::from_vec(vec![0.6, 1.2]),
        ),
    };
    let n_y = g.nrows();
    from_matrix(g, y, DMatrix::identity(n_y, n_y) * 0.01, Some(theta_ref))
}

/// Hilbert matrix problem `G_ij = 1/(i + j - 1)`, `y = G 1`, truth `1`.
pub fn hilbert(n_theta: usize) -> InverseProblem {
    assert!(n_theta >= 1);
    let g = DMatrix::from_fn(n_theta, n_theta, |i, j| 1.0 / ((i + j + 1) as f64));
    let theta_ref = DVector::from_element(n_theta, 1.0);
    let y = &g * &theta_ref;
    from_matrix(
        g,
        y,
        DMatrix::identity(n_theta, n_theta) * 0.01,
        Some(theta_ref),
    )
}
