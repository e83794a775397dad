//! Problem construction and run execution with file outputs.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use kalinv::engines::{run, ConvergenceRecord, Ensemble, HyperParams, Method, State};
use kalinv::gaussian::GaussianState;
use kalinv::problems::lorenz96::{sigma_eta_from_obs, Lorenz96Config};
use kalinv::problems::{
    add_noise, darcy2d, format_g17, hilbert, linear2, lorenz63, InverseProblem, Linear2Variant,
    Lorenz63Variant,
};
use kalinv::uks::{run_uks, BayesianSpec, UksRecord};

use crate::config::{MethodChoice, ProblemSpec, RunConfig};

/// Seed stream for observation noise, kept apart from the problem's own
/// truth-generation stream.
fn noise_seed(seed: u64) -> u64 {
    seed ^ 0xa5a5_5a5a_dead_beef
}

pub struct BuiltProblem {
    pub problem: InverseProblem,
    pub r0: DVector<f64>,
    /// Set when the forward map is linear (enables kf and exact posteriors).
    pub is_linear: bool,
}

/// Instantiates the benchmark, applies observation noise, and wires the
/// problem-specific conventions (prior mean, noise-dependent error model).
pub fn build_problem(cfg: &RunConfig) -> Result<BuiltProblem> {
    let nseed = noise_seed(cfg.seed);
    let (mut problem, is_linear) = match &cfg.problem {
        ProblemSpec::Linear2 { variant } => {
            let v = match variant.as_str() {
                "NS" => Linear2Variant::Ns,
                "OD" => Linear2Variant::Od,
                _ => Linear2Variant::Ud,
            };
            (linear2(v), true)
        }
        ProblemSpec::Hilbert { n_theta } => (hilbert(*n_theta), true),
        ProblemSpec::Darcy {
            grid_n,
            n_modes_truth,
            n_theta,
        } => (
            darcy2d(*grid_n, *n_modes_truth, *n_theta, cfg.seed)
                .context("darcy truth generation failed")?,
            false,
        ),
        ProblemSpec::Lorenz63 { variant } => {
            let v = if variant == "three_param" {
                Lorenz63Variant::ThreeParam
            } else {
                Lorenz63Variant::OneParam
            };
            (
                lorenz63(v, cfg.seed).context("lorenz63 truth generation failed")?,
                false,
            )
        }
        ProblemSpec::Lorenz96 => (
            kalinv::problems::lorenz96_with_config(cfg.seed, Lorenz96Config::default())
                .context("lorenz96 truth generation failed")?,
            false,
        ),
    };
    if cfg.noise_level > 0.0 {
        problem.y_obs = add_noise(&problem.y_obs, cfg.noise_level, nseed);
        // the chaotic closure benchmark scales its error model with the
        // observation it actually sees
        if matches!(cfg.problem, ProblemSpec::Lorenz96) {
            problem.sigma_eta = sigma_eta_from_obs(&problem.y_obs);
        }
    }
    if cfg.fd_jacobian && problem.jacobian.is_none() {
        problem = problem.with_fd_jacobian();
    }
    let r0 = DVector::from_element(problem.n_theta, cfg.problem.default_r0_value());
    Ok(BuiltProblem {
        problem,
        r0,
        is_linear,
    })
}

#[derive(Serialize)]
struct DerivedParams {
    sigma_omega_scale: f64,
    sigma_nu_row_major: Vec<f64>,
    spread_a: f64,
    r0: Vec<f64>,
    noise_seed: u64,
}

#[derive(Serialize)]
struct Manifest<'a> {
    config: &'a RunConfig,
    derived: DerivedParams,
    toolkit_version: &'static str,
    termination: String,
    duration_seconds: f64,
    files: Vec<String>,
}

fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn write_history_csv(path: &Path, records: &[ConvergenceRecord]) -> Result<()> {
    let mut f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    writeln!(f, "iteration,misfit,param_error,field_error,cov_frobenius")?;
    for r in records {
        let param = r.param_error.map(format_g17).unwrap_or_default();
        let field = r.field_error.map(format_g17).unwrap_or_default();
        writeln!(
            f,
            "{},{},{},{},{}",
            r.iteration,
            format_g17(r.misfit),
            param,
            field,
            format_g17(r.cov_frobenius)
        )?;
    }
    Ok(())
}

/// At most this many sampler steps are expanded into history rows; each row
/// costs one forward evaluation for the misfit column.
const UKS_HISTORY_ROWS: usize = 2000;

fn uks_history_to_records(history: &[UksRecord], problem: &InverseProblem) -> Vec<ConvergenceRecord> {
    let stride = history.len().div_ceil(UKS_HISTORY_ROWS).max(1);
    history
        .iter()
        .filter(|r| r.step % stride == 0 || r.step == history.len())
        .map(|r| {
            let misfit = problem.misfit(&r.mean).unwrap_or(f64::NAN);
            ConvergenceRecord {
                iteration: r.step,
                mean: r.mean.clone(),
                cov_frobenius: r.cov_frobenius,
                misfit,
                param_error: problem.param_error(&r.mean),
                field_error: problem.field_error.as_ref().map(|fe| fe(&r.mean)),
            }
        })
        .collect()
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum FinalStateJson {
    Gaussian {
        n_theta: usize,
        mean: Vec<f64>,
        cov_row_major: Vec<f64>,
    },
    Ensemble {
        n_theta: usize,
        particles: Vec<Vec<f64>>,
    },
}

fn final_state_json(state: &State) -> FinalStateJson {
    match state {
        State::Gaussian(g) => FinalStateJson::Gaussian {
            n_theta: g.dim(),
            mean: g.mean.iter().copied().collect(),
            cov_row_major: g.cov.transpose().as_slice().to_vec(),
        },
        State::Ensemble(e) => FinalStateJson::Ensemble {
            n_theta: e.particles[0].len(),
            particles: e
                .particles
                .iter()
                .map(|p| p.iter().copied().collect())
                .collect(),
        },
    }
}

/// Executes the configured run. Returns the process exit code; partial
/// histories are preserved on aborted runs.
pub fn execute(cfg: &RunConfig) -> Result<i32> {
    let start = Instant::now();
    if cfg.output_dir.exists() && !cfg.output_dir.is_dir() {
        bail!("output_dir {} exists and is not a directory", cfg.output_dir.display());
    }
    fs::create_dir_all(&cfg.output_dir)
        .with_context(|| format!("creating output dir {}", cfg.output_dir.display()))?;

    let built = build_problem(cfg)?;
    let problem = &built.problem;
    let n_theta = problem.n_theta;
    if cfg.method == MethodChoice::Kf && !built.is_linear {
        bail!("method 'kf' is the exact linear filter; use it with linear2 or hilbert");
    }

    let mut hp = HyperParams::for_problem(problem, cfg.alpha, built.r0.clone(), cfg.gamma)
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    if let Some(a) = cfg.spread_a {
        hp = hp.with_spread(a);
    }

    let derived = DerivedParams {
        sigma_omega_scale: (2.0 - cfg.alpha * cfg.alpha) * cfg.gamma,
        sigma_nu_row_major: hp.sigma_nu.transpose().as_slice().to_vec(),
        spread_a: hp.spread_a,
        r0: built.r0.iter().copied().collect(),
        noise_seed: noise_seed(cfg.seed),
    };
    let manifest_path = cfg.output_dir.join("manifest.json");
    let mut manifest = Manifest {
        config: cfg,
        derived,
        toolkit_version: env!("CARGO_PKG_VERSION"),
        termination: "running".to_string(),
        duration_seconds: 0.0,
        files: vec!["manifest.json".to_string()],
    };
    write_manifest(&manifest_path, &manifest)?;

    let obs_path = cfg.output_dir.join("observations.csv");
    problem.write_observations_csv(&obs_path)?;
    manifest.files.push("observations.csv".to_string());

    let history_path = cfg.output_dir.join("history.csv");
    let final_path = cfg.output_dir.join("final_state.json");

    let outcome: Result<(Vec<ConvergenceRecord>, Option<State>), (Vec<ConvergenceRecord>, String)> =
        match cfg.method {
            MethodChoice::Uks => {
                let spec = BayesianSpec {
                    r0: built.r0.clone(),
                    sigma0: DMatrix::identity(n_theta, n_theta) * cfg.gamma,
                    forward: problem.forward.clone(),
                    y: problem.y_obs.clone(),
                    sigma_eta: problem.sigma_eta.clone(),
                    linear: if built.is_linear {
                        problem
                            .jacobian
                            .as_ref()
                            .and_then(|j| j(&DVector::zeros(n_theta)).ok())
                    } else {
                        None
                    },
                };
                let init = GaussianState::isotropic(built.r0.clone(), cfg.gamma);
                match run_uks(&spec, init, cfg.uks_h, cfg.uks_t_end) {
                    Ok(out) => Ok((
                        uks_history_to_records(&out.history, problem),
                        Some(State::Gaussian(out.final_state)),
                    )),
                    Err(e) => Err((
                        uks_history_to_records(&e.history, problem),
                        format!("aborted: {}", e.source),
                    )),
                }
            }
            method => {
                let engine_method = match method {
                    MethodChoice::Uki => Method::Uki,
                    MethodChoice::Exki => Method::Exki,
                    MethodChoice::Eki => Method::Eki,
                    MethodChoice::Kf => Method::Kf,
                    MethodChoice::Uks => unreachable!(),
                };
                let init = if method == MethodChoice::Eki {
                    let j = cfg
                        .ensemble_size
                        .unwrap_or_else(|| cfg.problem.default_ensemble_size(n_theta));
                    let cov = DMatrix::identity(n_theta, n_theta) * cfg.gamma;
                    State::Ensemble(
                        Ensemble::sample(&built.r0, &cov, j, cfg.seed)
                            .map_err(|e| anyhow::anyhow!("{e}"))?,
                    )
                } else {
                    State::Gaussian(GaussianState::isotropic(built.r0.clone(), cfg.gamma))
                };
                match run(engine_method, problem, &hp, init, cfg.n_iters) {
                    Ok(out) => Ok((out.history, Some(out.final_state))),
                    Err(e) => Err((e.history.clone(), format!("aborted: {}", e.source))),
                }
            }
        };

    let exit_code = match outcome {
        Ok((history, final_state)) => {
            write_history_csv(&history_path, &history)?;
            manifest.files.push("history.csv".to_string());
            if let Some(state) = final_state {
                let json = serde_json::to_string_pretty(&final_state_json(&state))?;
                fs::write(&final_path, json)?;
                manifest.files.push("final_state.json".to_string());
                if let State::Gaussian(g) = &state {
                    println!("final mean: {:?}", g.mean.as_slice());
                }
            }
            manifest.termination = "completed".to_string();
            0
        }
        Err((history, status)) => {
            write_history_csv(&history_path, &history)?;
            manifest.files.push("history.csv".to_string());
            eprintln!("kalinv: {status} ({} iterations completed)", history.len());
            manifest.termination = status;
            1
        }
    };
    manifest.duration_seconds = start.elapsed().as_secs_f64();
    write_manifest(&manifest_path, &manifest)?;
    Ok(exit_code)
}
