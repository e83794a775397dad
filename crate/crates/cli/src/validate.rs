//! Theory validation reports: runs the linear-theory oracles on the built-in
//! 2-parameter systems and emits pass/fail residuals at documented tolerances.

use std::path::Path;

use anyhow::{Context, Result};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use kalinv::engines::{kalman_step, HyperParams};
use kalinv::gaussian::GaussianState;
use kalinv::problems::{linear2, Linear2Variant};
use kalinv::theory::{
    algebraic_law_check, divergence_bound_check, phi_r_gradient_fd, solve_steady_state,
    LinearProblemSpec,
};

#[derive(Serialize)]
pub struct Check {
    name: String,
    value: f64,
    tolerance: f64,
    pass: bool,
}

impl Check {
    fn below(name: &str, value: f64, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            value,
            tolerance,
            pass: value < tolerance,
        }
    }

    fn at_least(name: &str, value: f64, bound: f64) -> Self {
        Self {
            name: name.to_string(),
            value,
            tolerance: bound,
            pass: value >= bound,
        }
    }
}

#[derive(Serialize)]
pub struct TheoryReport {
    spec: String,
    checks: Vec<Check>,
    pass: bool,
}

fn spec_for(variant: Linear2Variant, alpha: f64) -> LinearProblemSpec {
    let p = linear2(variant);
    let g = p.jacobian.as_ref().unwrap()(&DVector::zeros(2)).unwrap();
    LinearProblemSpec {
        sigma_nu: &p.sigma_eta * 2.0,
        sigma_omega: DMatrix::identity(2, 2) * ((2.0 - alpha * alpha) * 0.25),
        g,
        y: p.y_obs.clone(),
        alpha,
        r0: DVector::zeros(2),
    }
}

/// Steady-state checks for a spec with a unique attracting fixed point:
/// 500-step filter agreement, and the gradient at the minimizer.
fn steady_checks(spec: &LinearProblemSpec) -> Result<Vec<Check>> {
    let ss = solve_steady_state(spec).map_err(|e| anyhow::anyhow!("{e}"))?;
    let mut checks = vec![Check::below(
        "steady_equation_residual",
        spec.steady_residual(&ss.c_inf).map_err(|e| anyhow::anyhow!("{e}"))?,
        1e-10,
    )];
    let hp = HyperParams {
        alpha: spec.alpha,
        r0: spec.r0.clone(),
        gamma: 0.25,
        sigma_omega: spec.sigma_omega.clone(),
        sigma_nu: spec.sigma_nu.clone(),
        spread_a: 1.0,
    };
    let mut state = GaussianState::isotropic(DVector::zeros(2), 0.25);
    for _ in 0..500 {
        state = kalman_step(&state, &spec.g, &spec.y, &hp).map_err(|e| anyhow::anyhow!("{e}"))?;
    }
    checks.push(Check::below(
        "filter_mean_agreement_n500",
        (&state.mean - &ss.m_inf).norm(),
        1e-8,
    ));
    checks.push(Check::below(
        "filter_cov_agreement_n500",
        (&state.cov - &ss.c_inf).norm(),
        1e-8,
    ));
    let grad = phi_r_gradient_fd(spec, &ss.c_hat_inf, &ss.m_inf).map_err(|e| anyhow::anyhow!("{e}"))?;
    checks.push(Check::below(
        "phi_r_gradient_at_minimizer",
        grad.norm(),
        1e-6 * (1.0 + spec.y.norm()),
    ));
    Ok(checks)
}

pub fn validate(selector: &str, out: &Path) -> Result<bool> {
    let (name, checks) = match selector {
        "ns" => ("ns", steady_checks(&spec_for(Linear2Variant::Ns, 1.0))?),
        "od" => ("od", steady_checks(&spec_for(Linear2Variant::Od, 1.0))?),
        "ud" => ("ud", steady_checks(&spec_for(Linear2Variant::Ud, 0.5))?),
        "ud-alpha1" => {
            let mut checks = Vec::new();
            // algebraic law of the unregularized filter, at unit observation
            // scale so f64 inversion can certify the 1e-10 tolerance
            let g = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
            let law = algebraic_law_check(
                &g,
                &DMatrix::identity(1, 1),
                &(DMatrix::identity(2, 2) * 0.25),
                &DVector::zeros(2),
                &DVector::from_vec(vec![3.0]),
                50,
            )
            .map_err(|e| anyhow::anyhow!("{e}"))?;
            checks.push(Check::below(
                "algebraic_law_precision_residual",
                law.max_precision_residual,
                1e-10,
            ));
            checks.push(Check::below(
                "algebraic_law_mean_residual",
                law.max_mean_residual,
                1e-10,
            ));
            // covariance growth bound with the standard prescription
            let spec = spec_for(Linear2Variant::Ud, 1.0);
            let report = divergence_bound_check(
                &spec,
                &(DMatrix::identity(2, 2) * 0.25),
                &DVector::zeros(2),
                200,
            )
            .map_err(|e| anyhow::anyhow!("{e}"))?;
            checks.push(Check::at_least(
                "divergence_bound_min_margin",
                report.min_margin,
                -1e-10,
            ));
            checks.push(Check::below(
                "limit_mean_error",
                (&report.final_mean - DVector::from_vec(vec![0.6, 1.2])).norm(),
                5e-3,
            ));
            ("ud-alpha1", checks)
        }
        other => anyhow::bail!("unknown spec '{other}' (ns, od, ud, ud-alpha1)"),
    };
    let pass = checks.iter().all(|c| c.pass);
    let report = TheoryReport {
        spec: name.to_string(),
        checks,
        pass,
    };
    let text = serde_json::to_string_pretty(&report)?;
    std::fs::write(out, text).with_context(|| format!("writing {}", out.display()))?;
    for c in &report.checks {
        println!(
            "{} {}: {:.3e} (tolerance {:.1e})",
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            c.value,
            c.tolerance
        );
    }
    Ok(pass)
}
