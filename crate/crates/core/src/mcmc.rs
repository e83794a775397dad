//! Random-walk Metropolis oracle for posterior moments.
//!
//! Used to validate the unscented Kalman sampler on non-Gaussian posteriors.
//! The proposal is Gaussian with covariance `step_size^2 * Sigma_0`, the
//! natural prior-scaled reading of a scalar step size.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::gaussian::cholesky_psd;
use crate::uks::{BayesianSpec, UksError};

#[derive(Debug, Clone)]
pub struct McmcSummary {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub acceptance_rate: f64,
    /// Post-burn-in samples the moments were computed from.
    pub n_kept: usize,
}

/// Random-walk Metropolis targeting `exp(-Phi(theta) - 0.5 ||Sigma_0^-1/2 (theta - r0)||^2)`.
///
/// The chain starts at the prior mean; proposals whose forward evaluation
/// fails are rejected. Moments use the samples after `burn_in`.
pub fn rw_metropolis(
    spec: &BayesianSpec,
    n_samples: usize,
    step_size: f64,
    burn_in: usize,
    seed: u64,
) -> Result<McmcSummary, UksError> {
    assert!(n_samples > burn_in, "need samples beyond the burn-in");
    assert!(step_size >= 0.0);
    let n = spec.n_theta();
    let chol0 = cholesky_psd(&spec.sigma0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut theta = spec.r0.clone();
    let mut log_p = spec.log_target(&theta)?;

    let mut accepted = 0usize;
    let mut kept = 0usize;
    let mut sum = DVector::zeros(n);
    let mut sum_outer = DMatrix::zeros(n, n);

    for i in 0..n_samples {
        let z = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
        let proposal = &theta + &chol0.l * z * step_size;
        let log_q = spec.log_target(&proposal);
        let log_u: f64 = rng.gen_range(0.0f64..1.0).ln();
        if let Ok(lq) = log_q {
            if log_u < lq - log_p {
                theta = proposal;
                log_p = lq;
                accepted += 1;
            }
        }
        if i >= burn_in {
            kept += 1;
            sum += &theta;
            sum_outer += &theta * theta.transpose();
        }
    }

    let mean = &sum / kept as f64;
    let cov = (sum_outer - &mean * mean.transpose() * kept as f64) / (kept as f64 - 1.0);
    Ok(McmcSummary {
        mean,
        cov,
        acceptance_rate: accepted as f64 / n_samples as f64,
        n_kept: kept,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn linear_spec() -> BayesianSpec {
        BayesianSpec::linear_gaussian(
            DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]),
            DVector::from_vec(vec![3.0, 7.0]),
            DMatrix::identity(2, 2) * 0.25,
            DVector::zeros(2),
            DMatrix::identity(2, 2),
        )
    }

    #[test]
    fn moments_match_conjugate_posterior() {
        let spec = linear_spec();
        let (m_ref, c_ref) = spec.posterior_moments().unwrap();
        let out = rw_metropolis(&spec, 400_000, 1.0, 50_000, 1).unwrap();
        // within 3 standard errors, taking the integrated autocorrelation
        // into account via a conservative inflation factor
        let neff = out.n_kept as f64 / 50.0;
        for i in 0..2 {
            let se = (c_ref[(i, i)] / neff).sqrt();
            assert!(
                (out.mean[i] - m_ref[i]).abs() < 3.0 * se,
                "component {i}: {} vs {} (se {se})",
                out.mean[i],
                m_ref[i]
            );
        }
        assert!((out.cov.clone() - c_ref).norm() < 0.05);
    }

    #[test]
    fn vanishing_step_accepts_everything() {
        let spec = linear_spec();
        let out = rw_metropolis(&spec, 2_000, 1e-12, 100, 7).unwrap();
        assert!(out.acceptance_rate > 0.999);
    }

    #[test]
    fn failing_forward_proposals_are_rejected() {
        // forward map fails outside a ball: the chain must stay inside and
        // still produce finite moments
        let forward = Arc::new(|theta: &DVector<f64>| {
            if theta.norm() > 1.5 {
                Err(crate::problems::ForwardError::NonFinite)
            } else {
                Ok(theta.clone())
            }
        });
        let spec = BayesianSpec::new(
            forward,
            DVector::zeros(2),
            DMatrix::identity(2, 2),
            DVector::zeros(2),
            DMatrix::identity(2, 2),
        );
        let out = rw_metropolis(&spec, 20_000, 0.5, 1_000, 3).unwrap();
        assert!(out.mean.norm() < 1.0);
        assert!(out.acceptance_rate > 0.0);
    }
}
