//! Command-line driver: convergence studies and adaptive runs with
//! machine-readable CSV/JSON output.

mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use femzz::adaptivity::{controller_by_name, run_adaptive, AdaptConfig, AdaptError, CONTROLLER_NAMES};
use femzz::benchmarks::{problem_registry, uniform_study, ThetaVariant, UniformStudyConfig};
use femzz::indicators::{Constants, DualNormChoice, EpsilonVariant};

use config::FileConfig;
use output::{OutputWriter, RunManifest};

const EXIT_USAGE: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(name = "femzz", version, about = "Adaptive FEM for the 2D heat equation with recovery-based error control")]
struct Cli {
    /// INI-style key=value configuration file; explicit flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Space-time uniform convergence study over a ladder of mesh levels.
    Uniform(UniformArgs),
    /// Space/time adaptive run.
    Adapt(AdaptArgs),
}

#[derive(Args, Debug, Default)]
struct UniformArgs {
    /// Benchmark problem: p1 | p2 | p3
    #[arg(long)]
    problem: Option<String>,
    /// Polynomial degree 1..=4
    #[arg(long)]
    degree: Option<usize>,
    /// Refinement levels, inclusive range "A..B"
    #[arg(long)]
    levels: Option<String>,
    /// Coefficient c in tau = c h^k
    #[arg(long = "tau-coef")]
    tau_coef: Option<f64>,
    /// Power k in tau = c h^k
    #[arg(long = "tau-power")]
    tau_power: Option<i32>,
    #[arg(long = "t-end")]
    t_end: Option<f64>,
    /// Cumulative time indicator form: h-1 | energy
    #[arg(long = "theta-variant")]
    theta_variant: Option<String>,
    /// Elliptic slab averaging: endpoint-mean | slab-mean
    #[arg(long = "eps-variant")]
    eps_variant: Option<String>,
    /// Dual-norm evaluation inside theta: h-1 | poincare
    #[arg(long = "dual-norm")]
    dual_norm: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    constants: ConstantArgs,
}

#[derive(Args, Debug, Default)]
struct AdaptArgs {
    /// Benchmark problem: p1 | p2 | p3 | fourier
    #[arg(long)]
    problem: Option<String>,
    #[arg(long)]
    degree: Option<usize>,
    #[arg(long = "tol-eps")]
    tol_eps: Option<f64>,
    #[arg(long = "tol-gamma")]
    tol_gamma: Option<f64>,
    #[arg(long = "tol-theta")]
    tol_theta: Option<f64>,
    #[arg(long = "tol-theta-min")]
    tol_theta_min: Option<f64>,
    /// Maximum-strategy marking threshold in [0, 1]
    #[arg(long)]
    xi: Option<f64>,
    /// Refinement sweeps per timestep
    #[arg(long = "k-max")]
    k_max: Option<usize>,
    #[arg(long)]
    tau0: Option<f64>,
    #[arg(long = "t-end")]
    t_end: Option<f64>,
    /// Timestep control: explicit | implicit | uniform
    #[arg(long)]
    timestep: Option<String>,
    /// Comma-separated times at which to write mesh snapshots
    #[arg(long = "snapshot-times")]
    snapshot_times: Option<String>,
    /// Uniformly pre-refine the macro mesh to this mesh size first
    #[arg(long = "initial-h")]
    initial_h: Option<f64>,
    /// Elliptic slab averaging: endpoint-mean | slab-mean
    #[arg(long = "eps-variant")]
    eps_variant: Option<String>,
    /// Dual-norm evaluation inside theta and gamma: h-1 | poincare
    #[arg(long = "dual-norm")]
    dual_norm: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    constants: ConstantArgs,
}

#[derive(Args, Debug, Default)]
struct ConstantArgs {
    /// Elliptic estimator constant C0
    #[arg(long)]
    c0: Option<f64>,
    /// Shape-regularity constant of the energy time indicator
    #[arg(long = "c-mu")]
    c_mu: Option<f64>,
    /// Shape-regularity constant of the higher-order mesh-change indicator
    #[arg(long = "c-mu-prime")]
    c_mu_prime: Option<f64>,
    /// Poincare constant (default: domain diameter / pi)
    #[arg(long = "c-p")]
    c_p: Option<f64>,
}

fn main() -> ExitCode {
    init_thread_pool();
    let cli = Cli::parse();
    let file_config = match cli.config.as_deref().map(FileConfig::load).transpose() {
        Ok(cfg) => cfg.unwrap_or_default(),
        Err(e) => return usage_error(&format!("cannot read config file: {e}")),
    };
    match cli.command {
        Command::Uniform(args) => cmd_uniform(args, &file_config),
        Command::Adapt(args) => cmd_adapt(args, &file_config),
    }
}

fn init_thread_pool() {
    if let Ok(threads) = std::env::var("FEMZZ_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

fn usage_error(msg: &str) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(EXIT_USAGE)
}

fn parse_levels(s: &str) -> Option<(usize, usize)> {
    let (a, b) = s.split_once("..")?;
    let lo: usize = a.trim().parse().ok()?;
    let hi: usize = b.trim().parse().ok()?;
    if lo <= hi {
        Some((lo, hi))
    } else {
        None
    }
}

fn resolve_constants(args: &ConstantArgs, file: &FileConfig, default_c_p: f64) -> Constants {
    Constants {
        c0: args.c0.or_else(|| file.get_f64("c0")).unwrap_or(1.0),
        c_mu: args.c_mu.or_else(|| file.get_f64("c_mu")).unwrap_or(1.0),
        c_mu_prime: args
            .c_mu_prime
            .or_else(|| file.get_f64("c_mu_prime"))
            .unwrap_or(1.0),
        c_p: args.c_p.or_else(|| file.get_f64("c_p")).unwrap_or(default_c_p),
    }
}

fn parse_eps_variant(s: &str) -> Option<EpsilonVariant> {
    EpsilonVariant::parse(s)
}

fn cmd_uniform(args: UniformArgs, file: &FileConfig) -> ExitCode {
    let setup_start = Instant::now();
    let problem_name = match args.problem.clone().or_else(|| file.get("problem")) {
        Some(p) => p,
        None => return usage_error("missing --problem (p1 | p2 | p3)"),
    };
    let registry = problem_registry();
    let problem = match registry.create(&problem_name) {
        Some(p) => p,
        None => {
            return usage_error(&format!(
                "unknown problem '{problem_name}' (available: {})",
                registry.names().join(", ")
            ))
        }
    };
    let degree = args.degree.or_else(|| file.get_usize("degree")).unwrap_or(1);
    if !(1..=4).contains(&degree) {
        return usage_error("--degree must be in 1..=4");
    }
    let levels_spec = match args.levels.clone().or_else(|| file.get("levels")) {
        Some(l) => l,
        None => return usage_error("missing --levels A..B"),
    };
    let (level_min, level_max) = match parse_levels(&levels_spec) {
        Some(l) => l,
        None => return usage_error("--levels must be an inclusive range like 4..7"),
    };
    let tau_coef = match args.tau_coef.or_else(|| file.get_f64("tau_coef")) {
        Some(c) if c > 0.0 => c,
        Some(_) => return usage_error("--tau-coef must be positive"),
        None => return usage_error("missing --tau-coef"),
    };
    let tau_power = match args.tau_power.or_else(|| file.get_i32("tau_power")) {
        Some(k) => k,
        None => return usage_error("missing --tau-power"),
    };
    let theta_variant = match args
        .theta_variant
        .clone()
        .or_else(|| file.get("theta_variant"))
        .as_deref()
    {
        None => ThetaVariant::DualNorm,
        Some(s) => match ThetaVariant::parse(s) {
            Some(v) => v,
            None => return usage_error("--theta-variant must be h-1 or energy"),
        },
    };
    let eps_variant = match args
        .eps_variant
        .clone()
        .or_else(|| file.get("eps_variant"))
        .as_deref()
    {
        None => EpsilonVariant::EndpointMean,
        Some(s) => match parse_eps_variant(s) {
            Some(v) => v,
            None => return usage_error("--eps-variant must be endpoint-mean or slab-mean"),
        },
    };
    let out_dir = args
        .out
        .clone()
        .or_else(|| file.get("out").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("femzz-out"));

    let default_c_p = problem.domain().diameter() / std::f64::consts::PI;
    let constants = resolve_constants(&args.constants, file, default_c_p);

    let mut config = UniformStudyConfig::new(degree, level_min, level_max, tau_coef, tau_power);
    config.t_end = args.t_end.or_else(|| file.get_f64("t_end"));
    config.theta_variant = theta_variant;
    config.epsilon_variant = eps_variant;
    config.constants = Some(constants);
    if let Some(name) = args.dual_norm.clone().or_else(|| file.get("dual_norm")) {
        match DualNormChoice::parse(&name) {
            Some(choice) => config.theta_dual = choice,
            None => return usage_error("--dual-norm must be h-1 or poincare"),
        }
    }

    let setup_s = setup_start.elapsed().as_secs_f64();
    let run_start = Instant::now();
    let study = match uniform_study(problem.as_ref(), &config) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_NUMERICAL);
        }
    };
    let run_s = run_start.elapsed().as_secs_f64();

    let write_start = Instant::now();
    let mut writer = OutputWriter::new(&out_dir);
    if let Err(e) = writer.write_study(&study) {
        eprintln!("error: cannot write output: {e}");
        return ExitCode::FAILURE;
    }
    let manifest = RunManifest {
        command: "uniform".into(),
        problem: problem_name,
        config_echo: format!("{config:?}"),
        out_dir: out_dir.display().to_string(),
        setup_seconds: setup_s,
        run_seconds: run_s,
        write_seconds: write_start.elapsed().as_secs_f64(),
    };
    if let Err(e) = writer.finish(manifest) {
        eprintln!("error: cannot write manifest: {e}");
        return ExitCode::FAILURE;
    }
    ExitCode::SUCCESS
}

fn cmd_adapt(args: AdaptArgs, file: &FileConfig) -> ExitCode {
    let setup_start = Instant::now();
    let problem_name = match args.problem.clone().or_else(|| file.get("problem")) {
        Some(p) => p,
        None => return usage_error("missing --problem (p1 | p2 | p3 | fourier)"),
    };
    let registry = problem_registry();
    let problem = match registry.create(&problem_name) {
        Some(p) => p,
        None => {
            return usage_error(&format!(
                "unknown problem '{problem_name}' (available: {})",
                registry.names().join(", ")
            ))
        }
    };
    let degree = args.degree.or_else(|| file.get_usize("degree")).unwrap_or(1);
    let tau0 = match args.tau0.or_else(|| file.get_f64("tau0")) {
        Some(t) if t > 0.0 => t,
        Some(_) => return usage_error("--tau0 must be positive"),
        None => return usage_error("missing --tau0"),
    };
    let t_end = args
        .t_end
        .or_else(|| file.get_f64("t_end"))
        .unwrap_or_else(|| problem.t_end_default());
    let timestep_name = args
        .timestep
        .clone()
        .or_else(|| file.get("timestep"))
        .unwrap_or_else(|| "explicit".into());
    let controller = match controller_by_name(&timestep_name) {
        Some(c) => c,
        None => {
            return usage_error(&format!(
                "unknown timestep mode '{timestep_name}' (available: {})",
                CONTROLLER_NAMES.join(", ")
            ))
        }
    };
    let snapshot_times: Vec<f64> = match args
        .snapshot_times
        .clone()
        .or_else(|| file.get("snapshot_times"))
    {
        None => Vec::new(),
        Some(list) => {
            let parsed: Result<Vec<f64>, _> =
                list.split(',').map(|s| s.trim().parse::<f64>()).collect();
            match parsed {
                Ok(v) => v,
                Err(_) => return usage_error("--snapshot-times must be comma-separated numbers"),
            }
        }
    };
    let eps_variant = match args
        .eps_variant
        .clone()
        .or_else(|| file.get("eps_variant"))
        .as_deref()
    {
        None => EpsilonVariant::EndpointMean,
        Some(s) => match parse_eps_variant(s) {
            Some(v) => v,
            None => return usage_error("--eps-variant must be endpoint-mean or slab-mean"),
        },
    };
    let out_dir = args
        .out
        .clone()
        .or_else(|| file.get("out").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("femzz-out"));

    let default_c_p = problem.domain().diameter() / std::f64::consts::PI;
    let constants = resolve_constants(&args.constants, file, default_c_p);

    let mut config = AdaptConfig::new(degree, tau0, t_end);
    if let Some(v) = args.tol_eps.or_else(|| file.get_f64("tol_eps")) {
        config.tol_eps = v;
    }
    if let Some(v) = args.tol_gamma.or_else(|| file.get_f64("tol_gamma")) {
        config.tol_gamma = v;
    }
    if let Some(v) = args.tol_theta.or_else(|| file.get_f64("tol_theta")) {
        config.tol_theta = v;
    }
    if let Some(v) = args.tol_theta_min.or_else(|| file.get_f64("tol_theta_min")) {
        config.tol_theta_min = v;
    }
    if let Some(v) = args.xi.or_else(|| file.get_f64("xi")) {
        config.xi = v;
    }
    if let Some(v) = args.k_max.or_else(|| file.get_usize("k_max")) {
        config.k_max = v;
    }
    config.initial_h = args.initial_h.or_else(|| file.get_f64("initial_h"));
    config.snapshot_times = snapshot_times;
    config.epsilon_variant = eps_variant;
    config.constants = Some(constants);
    if let Some(name) = args.dual_norm.clone().or_else(|| file.get("dual_norm")) {
        match DualNormChoice::parse(&name) {
            Some(choice) => config.theta_dual = choice,
            None => return usage_error("--dual-norm must be h-1 or poincare"),
        }
    }
    if let Err(e) = config.validate() {
        return usage_error(&e.to_string());
    }

    let setup_s = setup_start.elapsed().as_secs_f64();
    let run_start = Instant::now();
    let tolerance = config.global_tolerance();
    let (run, aborted) = match run_adaptive(problem.as_ref(), &config, controller.as_ref()) {
        Ok(run) => (run, false),
        Err(AdaptError::TauUnderflow { t, tau, partial }) => {
            eprintln!("error: timestep underflow at t = {t:.6e} (tau = {tau:.6e}); writing partial log");
            (*partial, true)
        }
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_NUMERICAL);
        }
    };
    let run_s = run_start.elapsed().as_secs_f64();

    let write_start = Instant::now();
    let mut writer = OutputWriter::new(&out_dir);
    if let Err(e) = writer.write_adaptive(&problem_name, degree, &config, &run) {
        eprintln!("error: cannot write output: {e}");
        return ExitCode::FAILURE;
    }
    let manifest = RunManifest {
        command: "adapt".into(),
        problem: problem_name,
        config_echo: format!("{config:?} tolerance={tolerance:.16e}"),
        out_dir: out_dir.display().to_string(),
        setup_seconds: setup_s,
        run_seconds: run_s,
        write_seconds: write_start.elapsed().as_secs_f64(),
    };
    if let Err(e) = writer.finish(manifest) {
        eprintln!("error: cannot write manifest: {e}");
        return ExitCode::FAILURE;
    }
    if aborted {
        ExitCode::from(EXIT_NUMERICAL)
    } else {
        ExitCode::SUCCESS
    }
}
