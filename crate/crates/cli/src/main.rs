//! `kalinv`: batch front-end for the iterated Kalman inversion toolkit.
//!
//! Subcommands: `run` executes a configured inversion and writes convergence
//! histories; `validate` exercises the linear-theory oracles; `landscape`
//! probes the Gaussian-smoothed landscape of the Lorenz63 time-average map.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

mod config;
mod runner;
mod validate;

use config::{ConfigFile, Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "kalinv", version, about = "Derivative-free iterated Kalman inversion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an inversion and write history.csv, final_state.json, manifest.json
    Run(RunArgs),
    /// Run the linear-theory validators and write theory_report.json
    Validate(ValidateArgs),
    /// Evaluate the smoothed landscape (FG, FdG) of the Lorenz63 map
    Landscape(LandscapeArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML config file; flags below override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// Problem spec, e.g. linear2:NS, hilbert:10, darcy:grid=32,modes=64,ntheta=8,
    /// lorenz63:three_param, lorenz96
    #[arg(long)]
    problem: Option<String>,
    /// uki | exki | eki | kf | uks
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long = "iters")]
    n_iters: Option<usize>,
    #[arg(long)]
    ensemble_size: Option<usize>,
    #[arg(long)]
    noise_level: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Sigma-point spread; defaults to min(sqrt(4/n_theta), 1)
    #[arg(long)]
    spread_a: Option<f64>,
    #[arg(long = "out")]
    output_dir: Option<PathBuf>,
    /// UKS time step
    #[arg(long)]
    uks_h: Option<f64>,
    /// UKS integration horizon
    #[arg(long)]
    uks_t_end: Option<f64>,
    /// Provide a central finite-difference Jacobian to ExKI when the model
    /// has none
    #[arg(long)]
    fd_jacobian: bool,
}

#[derive(Args)]
struct ValidateArgs {
    /// ns | od | ud | ud-alpha1
    #[arg(long)]
    spec: String,
    /// Report path (default: theory_report.json in the working directory)
    #[arg(long = "out")]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct LandscapeArgs {
    /// Only lorenz63:one_param has a scalar landscape
    #[arg(long, default_value = "lorenz63:one_param")]
    problem: String,
    #[arg(long)]
    r_min: f64,
    #[arg(long)]
    r_max: f64,
    #[arg(long, default_value_t = 41)]
    points: usize,
    #[arg(long)]
    sigma_r: f64,
    #[arg(long, default_value_t = 16)]
    quad_order: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "out")]
    output: PathBuf,
}

fn init_thread_pool() {
    if let Ok(text) = std::env::var("KALINV_THREADS") {
        if let Ok(n) = text.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

fn cmd_run(args: RunArgs) -> Result<i32> {
    let file = match &args.config {
        Some(path) => ConfigFile::load(path).map_err(|e| anyhow::anyhow!("{e}"))?,
        None => ConfigFile::default(),
    };
    let flags = Overrides {
        problem: args.problem,
        method: args.method,
        alpha: args.alpha,
        gamma: args.gamma,
        n_iters: args.n_iters,
        ensemble_size: args.ensemble_size,
        noise_level: args.noise_level,
        seed: args.seed,
        spread_a: args.spread_a,
        output_dir: args.output_dir,
        uks_h: args.uks_h,
        uks_t_end: args.uks_t_end,
        fd_jacobian: args.fd_jacobian,
    };
    let cfg = RunConfig::resolve(file, flags).map_err(|e| anyhow::anyhow!("{e}"))?;
    runner::execute(&cfg)
}

fn cmd_landscape(args: LandscapeArgs) -> Result<i32> {
    if args.problem != "lorenz63:one_param" {
        anyhow::bail!("landscape requires a scalar-parameter problem; only lorenz63:one_param is available");
    }
    anyhow::ensure!(args.points >= 2, "need at least two grid points");
    anyhow::ensure!(args.r_max > args.r_min, "r_max must exceed r_min");
    let grid: Vec<f64> = (0..args.points)
        .map(|i| args.r_min + (args.r_max - args.r_min) * i as f64 / (args.points - 1) as f64)
        .collect();
    let map = kalinv::problems::lorenz63::lorenz63_scalar_map(args.seed);
    let out = kalinv::landscape::averaged_landscape_1d(map, &grid, args.sigma_r, args.quad_order)
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    let mut f = std::fs::File::create(&args.output)
        .with_context(|| format!("creating {}", args.output.display()))?;
    writeln!(f, "r,fg,fdg")?;
    for p in &out {
        writeln!(
            f,
            "{},{},{}",
            kalinv::problems::format_g17(p.r),
            kalinv::problems::format_g17(p.fg),
            kalinv::problems::format_g17(p.fdg)
        )?;
    }
    println!("wrote {} landscape points to {}", out.len(), args.output.display());
    Ok(0)
}

fn main() -> ExitCode {
    init_thread_pool();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Validate(args) => {
            let out = args
                .output
                .unwrap_or_else(|| PathBuf::from("theory_report.json"));
            validate::validate(&args.spec, &out).map(|pass| if pass { 0 } else { 1 })
        }
        Command::Landscape(args) => cmd_landscape(args),
    };
    match outcome {
        Ok(0) => ExitCode::SUCCESS,
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("kalinv: {e:#}");
            ExitCode::from(2)
        }
    }
}
