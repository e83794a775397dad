//! Run configuration: TOML file plus flat flag overrides, resolved against
//! per-problem defaults before any computation starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
#[error("config error at '{field}': {reason}")]
pub struct ConfigError {
    pub field: String,
    pub reason: String,
}

impl ConfigError {
    pub fn new(field: &str, reason: impl Into<String>) -> Self {
        Self {
            field: field.to_string(),
            reason: reason.into(),
        }
    }
}

/// Which benchmark to run, with problem-specific parameters.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "name", rename_all = "lowercase")]
pub enum ProblemSpec {
    Linear2 { variant: String },
    Hilbert { n_theta: usize },
    Darcy { grid_n: usize, n_modes_truth: usize, n_theta: usize },
    Lorenz63 { variant: String },
    Lorenz96,
}

impl ProblemSpec {
    /// Parses `name[:args]`, e.g. `linear2:NS`, `hilbert:10`,
    /// `darcy:grid=32,modes=64,ntheta=8`, `lorenz63:three_param`, `lorenz96`.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let (name, args) = match text.split_once(':') {
            Some((n, a)) => (n.trim(), Some(a.trim())),
            None => (text.trim(), None),
        };
        match name.to_ascii_lowercase().as_str() {
            "linear2" => {
                let variant = args.unwrap_or("NS").to_ascii_uppercase();
                if !["NS", "OD", "UD"].contains(&variant.as_str()) {
                    return Err(ConfigError::new(
                        "problem",
                        format!("linear2 variant must be NS, OD, or UD, got '{variant}'"),
                    ));
                }
                Ok(ProblemSpec::Linear2 { variant })
            }
            "hilbert" => {
                let n_theta = match args {
                    None => 10,
                    Some(a) => a.parse().map_err(|_| {
                        ConfigError::new("problem", format!("hilbert size must be an integer, got '{a}'"))
                    })?,
                };
                if n_theta == 0 {
                    return Err(ConfigError::new("problem", "hilbert size must be positive"));
                }
                Ok(ProblemSpec::Hilbert { n_theta })
            }
            "darcy" => {
                let mut grid_n = 80usize;
                let mut n_modes_truth = 256usize;
                let mut n_theta = 32usize;
                if let Some(a) = args {
                    for kv in a.split(',').filter(|s| !s.is_empty()) {
                        let (k, v) = kv.split_once('=').ok_or_else(|| {
                            ConfigError::new("problem", format!("darcy expects key=value pairs, got '{kv}'"))
                        })?;
                        let v: usize = v.parse().map_err(|_| {
                            ConfigError::new("problem", format!("darcy {k} must be an integer"))
                        })?;
                        match k {
                            "grid" => grid_n = v,
                            "modes" => n_modes_truth = v,
                            "ntheta" => n_theta = v,
                            _ => {
                                return Err(ConfigError::new(
                                    "problem",
                                    format!("unknown darcy key '{k}' (use grid, modes, ntheta)"),
                                ))
                            }
                        }
                    }
                }
                if grid_n < 16 || grid_n % 8 != 0 {
                    return Err(ConfigError::new(
                        "problem",
                        "darcy grid must be a multiple of 8, at least 16",
                    ));
                }
                if n_theta > n_modes_truth {
                    return Err(ConfigError::new(
                        "problem",
                        "darcy ntheta cannot exceed the truth mode count",
                    ));
                }
                Ok(ProblemSpec::Darcy {
                    grid_n,
                    n_modes_truth,
                    n_theta,
                })
            }
            "lorenz63" => {
                let variant = args.unwrap_or("one_param").to_ascii_lowercase();
                if !["one_param", "three_param"].contains(&variant.as_str()) {
                    return Err(ConfigError::new(
                        "problem",
                        format!("lorenz63 variant must be one_param or three_param, got '{variant}'"),
                    ));
                }
                Ok(ProblemSpec::Lorenz63 { variant })
            }
            "lorenz96" => Ok(ProblemSpec::Lorenz96),
            other => Err(ConfigError::new(
                "problem",
                format!("unknown problem '{other}' (linear2, hilbert, darcy, lorenz63, lorenz96)"),
            )),
        }
    }

    /// Prior scale used when the config leaves gamma unset; the linear
    /// 2-parameter problem runs at the smaller 0.5^2 scale.
    pub fn default_gamma(&self) -> f64 {
        match self {
            ProblemSpec::Linear2 { .. } => 0.25,
            _ => 1.0,
        }
    }

    /// Prior mean component; Lorenz63 starts away from the truth at 5.
    pub fn default_r0_value(&self) -> f64 {
        match self {
            ProblemSpec::Lorenz63 { .. } => 5.0,
            _ => 0.0,
        }
    }

    /// Ensemble sizes follow the reference experiments where stated:
    /// 100 particles for Darcy, `2 n_theta + 1` elsewhere.
    pub fn default_ensemble_size(&self, n_theta: usize) -> usize {
        match self {
            ProblemSpec::Darcy { .. } => 100,
            _ => 2 * n_theta + 1,
        }
    }
}

/// On-disk config file; every field optional, resolved by [`RunConfig::resolve`].
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub problem: Option<String>,
    pub method: Option<String>,
    pub alpha: Option<f64>,
    pub gamma: Option<f64>,
    pub n_iters: Option<usize>,
    pub ensemble_size: Option<usize>,
    pub noise_level: Option<f64>,
    pub seed: Option<u64>,
    pub spread_a: Option<f64>,
    pub output_dir: Option<PathBuf>,
    pub uks_h: Option<f64>,
    pub uks_t_end: Option<f64>,
    pub fd_jacobian: Option<bool>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new("config", format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| ConfigError::new("config", e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodChoice {
    Uki,
    Exki,
    Eki,
    Kf,
    Uks,
}

impl MethodChoice {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        match text.to_ascii_lowercase().as_str() {
            "uki" => Ok(MethodChoice::Uki),
            "exki" => Ok(MethodChoice::Exki),
            "eki" => Ok(MethodChoice::Eki),
            "kf" => Ok(MethodChoice::Kf),
            "uks" => Ok(MethodChoice::Uks),
            other => Err(ConfigError::new(
                "method",
                format!("unknown method '{other}' (uki, exki, eki, kf, uks)"),
            )),
        }
    }
}

/// Fully-resolved run configuration.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub problem: ProblemSpec,
    pub problem_text: String,
    pub method: MethodChoice,
    pub alpha: f64,
    pub gamma: f64,
    pub n_iters: usize,
    pub ensemble_size: Option<usize>,
    pub noise_level: f64,
    pub seed: u64,
    pub spread_a: Option<f64>,
    pub output_dir: PathBuf,
    pub uks_h: f64,
    pub uks_t_end: f64,
    pub fd_jacobian: bool,
}

/// Flag-level overrides; every `Some` wins over the file value.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub problem: Option<String>,
    pub method: Option<String>,
    pub alpha: Option<f64>,
    pub gamma: Option<f64>,
    pub n_iters: Option<usize>,
    pub ensemble_size: Option<usize>,
    pub noise_level: Option<f64>,
    pub seed: Option<u64>,
    pub spread_a: Option<f64>,
    pub output_dir: Option<PathBuf>,
    pub uks_h: Option<f64>,
    pub uks_t_end: Option<f64>,
    pub fd_jacobian: bool,
}

impl RunConfig {
    pub fn resolve(file: ConfigFile, flags: Overrides) -> Result<Self, ConfigError> {
        let problem_text = flags
            .problem
            .or(file.problem)
            .ok_or_else(|| ConfigError::new("problem", "no problem given (file or --problem)"))?;
        let problem = ProblemSpec::parse(&problem_text)?;
        let method = MethodChoice::parse(
            &flags
                .method
                .or(file.method)
                .unwrap_or_else(|| "uki".to_string()),
        )?;
        let alpha = flags.alpha.or(file.alpha).unwrap_or(1.0);
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(ConfigError::new("alpha", "alpha must lie in (0,1]"));
        }
        let gamma = flags
            .gamma
            .or(file.gamma)
            .unwrap_or_else(|| problem.default_gamma());
        if gamma <= 0.0 {
            return Err(ConfigError::new("gamma", "gamma must be positive"));
        }
        let n_iters = flags.n_iters.or(file.n_iters).unwrap_or(20);
        if n_iters == 0 {
            return Err(ConfigError::new("n_iters", "need at least one iteration"));
        }
        let ensemble_size = flags.ensemble_size.or(file.ensemble_size);
        if let Some(j) = ensemble_size {
            if j < 2 {
                return Err(ConfigError::new(
                    "ensemble_size",
                    "ensemble needs at least two particles",
                ));
            }
        }
        let noise_level = flags.noise_level.or(file.noise_level).unwrap_or(0.0);
        if noise_level < 0.0 {
            return Err(ConfigError::new("noise_level", "noise level must be nonnegative"));
        }
        let seed = flags.seed.or(file.seed).unwrap_or(0);
        let spread_a = flags.spread_a.or(file.spread_a);
        if let Some(a) = spread_a {
            if a <= 0.0 {
                return Err(ConfigError::new("spread_a", "spread must be positive"));
            }
        }
        let output_dir = flags
            .output_dir
            .or(file.output_dir)
            .ok_or_else(|| ConfigError::new("output_dir", "no output directory (file or --out)"))?;
        let uks_h = flags.uks_h.or(file.uks_h).unwrap_or(5e-5);
        if uks_h <= 0.0 {
            return Err(ConfigError::new("uks_h", "time step must be positive"));
        }
        let uks_t_end = flags.uks_t_end.or(file.uks_t_end).unwrap_or(10.0);
        if uks_t_end < 0.0 {
            return Err(ConfigError::new("uks_t_end", "horizon must be nonnegative"));
        }
        let fd_jacobian = flags.fd_jacobian || file.fd_jacobian.unwrap_or(false);
        Ok(RunConfig {
            problem,
            problem_text,
            method,
            alpha,
            gamma,
            n_iters,
            ensemble_size,
            noise_level,
            seed,
            spread_a,
            output_dir,
            uks_h,
            uks_t_end,
            fd_jacobian,
        })
    }
}
