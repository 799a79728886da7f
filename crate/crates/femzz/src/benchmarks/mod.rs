//! Benchmark problems with manufactured sources, exact-error evaluation,
//! convergence-order and effectivity-index studies on space-time uniform
//! discretisations.

mod problems;

pub use problems::{
    fourier_coefficient, CornerSingular, FourierIncompatible, GaussianFast, GaussianSlow,
    Problem, ProblemRegistry,
};

use std::sync::Arc;

use thiserror::Error;

use crate::fespace::quadrature::QuadratureRule;
use crate::fespace::{transfer, FeError, FeSpace};
use crate::heat_stepper::{
    backward_euler_from_transferred, discrete_laplacian, extension_weights, l2_project,
    SolverConfig, StepError, TimeState,
};
use crate::indicators::{
    epsilon_tilde, gamma_tilde_indicator, h_minus1_norm_warm, theta_tilde_indicator, Constants,
    EpsilonVariant, EstimatorAccumulator, StepIndicators,
};
use crate::mesh::Mesh;
use crate::recovery::elliptic_estimator;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Step(#[from] StepError),
    #[error(transparent)]
    Space(#[from] FeError),
    #[error(transparent)]
    Mesh(#[from] crate::mesh::MeshError),
    #[error("EOC input must be positive and mesh sizes strictly decreasing")]
    BadEocInput,
}

/// Local log-log slopes of a(i) against h(i).
pub fn eoc(values: &[f64], sizes: &[f64]) -> Result<Vec<f64>, BenchError> {
    if values.len() != sizes.len() {
        return Err(BenchError::BadEocInput);
    }
    if values.iter().any(|&v| v <= 0.0) || sizes.iter().any(|&h| h <= 0.0) {
        return Err(BenchError::BadEocInput);
    }
    if sizes.windows(2).any(|w| w[1] >= w[0]) {
        return Err(BenchError::BadEocInput);
    }
    Ok(values
        .windows(2)
        .zip(sizes.windows(2))
        .map(|(v, h)| (v[1] / v[0]).ln() / (h[1] / h[0]).ln())
        .collect())
}

/// Estimator-to-error ratio; absent when the error vanishes.
pub fn effectivity_index(eta: f64, error: f64) -> Option<f64> {
    if error > 0.0 {
        Some(eta / error)
    } else {
        None
    }
}

/// Online accumulator for the exact space-time error of a run: the energy
/// integral uses five-point Gauss per time slab on the piecewise linear time
/// extension, space integrals use the overkill rule.
pub struct ErrorAccumulator {
    energy_sq: f64,
}

impl ErrorAccumulator {
    pub fn new() -> Self {
        ErrorAccumulator { energy_sq: 0.0 }
    }

    /// Accumulated ||U - u||_{L2(0,t; H^1_0)} up to the last slab added.
    pub fn energy(&self) -> f64 {
        self.energy_sq.max(0.0).sqrt()
    }

    pub fn add_slab(
        &mut self,
        mesh: &Mesh,
        prev: &TimeState,
        cur: &TimeState,
        problem: &dyn Problem,
    ) -> Result<(), BenchError> {
        // represent both endpoint solutions on the common refinement once
        let (a, b) = if prev.u.space.leaves == cur.u.space.leaves {
            // equal sections build identical DOF layouts; rebind to one space
            let rebound = cur
                .u
                .space
                .function_from(prev.u.coeffs.clone())
                .expect("equal sections have equal dimension");
            (rebound, cur.u.clone())
        } else {
            let cr_leaves = mesh.common_refinement(&prev.u.space.leaves, &cur.u.space.leaves);
            let cr = FeSpace::on_section(mesh, cr_leaves, cur.u.space.degree)?;
            (transfer(mesh, &prev.u, &cr)?, transfer(mesh, &cur.u, &cr)?)
        };
        let x1 = (3.0f64 / 7.0 - 2.0 / 7.0 * (6.0f64 / 5.0).sqrt()).sqrt();
        let x2 = (3.0f64 / 7.0 + 2.0 / 7.0 * (6.0f64 / 5.0).sqrt()).sqrt();
        let w1 = (322.0 + 13.0 * 70.0f64.sqrt()) / 900.0;
        let w2 = (322.0 - 13.0 * 70.0f64.sqrt()) / 900.0;
        let gauss5: [(f64, f64); 5] = [
            (-x2, w2),
            (-x1, w1),
            (0.0, 128.0 / 225.0),
            (x1, w1),
            (x2, w2),
        ];
        let mid = 0.5 * (prev.t + cur.t);
        let half = 0.5 * (cur.t - prev.t);
        for (xi, w) in gauss5 {
            let t = mid + half * xi;
            let (wa, wb) = extension_weights(prev.t, cur.t, t)?;
            let blend = a.scaled(wa).axpy(wb, &b);
            let e = blend.energy_distance_to(|x| problem.grad_u(x, t));
            self.energy_sq += w * half * e * e;
        }
        Ok(())
    }
}

impl Default for ErrorAccumulator {
    fn default() -> Self {
        Self::new()
    }
}

/// Which cumulative time indicator a study reports as Theta_m.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThetaVariant {
    /// First form: sum theta_n^2 tau_n (dual-norm indicator).
    DualNorm,
    /// Second form: sum (theta~_n^2 + gamma~_n^2) tau_n (energy indicator).
    Energy,
}

impl ThetaVariant {
    pub fn parse(s: &str) -> Option<ThetaVariant> {
        match s {
            "h-1" => Some(ThetaVariant::DualNorm),
            "energy" => Some(ThetaVariant::Energy),
            _ => None,
        }
    }
}

pub use crate::indicators::DualNormChoice;

#[derive(Debug, Clone)]
pub struct UniformStudyConfig {
    pub degree: usize,
    pub level_min: usize,
    pub level_max: usize,
    pub tau_coef: f64,
    pub tau_power: i32,
    pub t_end: Option<f64>,
    pub theta_variant: ThetaVariant,
    pub theta_dual: DualNormChoice,
    pub epsilon_variant: EpsilonVariant,
    pub constants: Option<Constants>,
    pub solver: SolverConfig,
}

impl UniformStudyConfig {
    pub fn new(degree: usize, level_min: usize, level_max: usize, c: f64, k: i32) -> Self {
        UniformStudyConfig {
            degree,
            level_min,
            level_max,
            tau_coef: c,
            tau_power: k,
            t_end: None,
            theta_variant: ThetaVariant::DualNorm,
            theta_dual: DualNormChoice::Ritz,
            epsilon_variant: EpsilonVariant::EndpointMean,
            constants: None,
            solver: SolverConfig::default(),
        }
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct LevelResult {
    pub level: usize,
    pub h: f64,
    pub tau: f64,
    pub dim: usize,
    pub steps: usize,
    /// Cumulative space indicator E_m at final time.
    pub e_cum: f64,
    /// Cumulative time indicator (the configured form) at final time.
    pub theta_cum: f64,
    /// sqrt(sum theta~^2 tau) alone, for indicator comparisons.
    pub theta_tilde_cum: f64,
    /// sqrt(sum gamma~^2 tau) alone.
    pub gamma_tilde_cum: f64,
    pub eta: f64,
    pub error_energy: f64,
    pub error_final_l2: f64,
    pub ei: Option<f64>,
    pub initial_error: f64,
}

#[derive(Debug)]
pub struct StudyResult {
    pub levels: Vec<LevelResult>,
    /// Per-level step logs (one vector of rows per level).
    pub logs: Vec<Vec<StepIndicators>>,
}

impl StudyResult {
    pub fn eoc_of<F>(&self, f: F) -> Result<Vec<f64>, BenchError>
    where
        F: Fn(&LevelResult) -> f64,
    {
        let values: Vec<f64> = self.levels.iter().map(&f).collect();
        let sizes: Vec<f64> = self.levels.iter().map(|l| l.h).collect();
        eoc(&values, &sizes)
    }
}

/// The uniform-study protocol: per level i, a fixed uniform mesh with
/// h = 2^{-i/2}, uniform timestep tau = c h^k, gamma = 0 by space invariance,
/// beta not accumulated.
pub fn uniform_study(
    problem: &dyn Problem,
    config: &UniformStudyConfig,
) -> Result<StudyResult, BenchError> {
    let mut levels = Vec::new();
    let mut logs = Vec::new();
    for level in config.level_min..=config.level_max {
        let (result, log) = run_uniform_level(problem, config, level)?;
        levels.push(result);
        logs.push(log);
    }
    Ok(StudyResult { levels, logs })
}

fn run_uniform_level(
    problem: &dyn Problem,
    config: &UniformStudyConfig,
    level: usize,
) -> Result<(LevelResult, Vec<StepIndicators>), BenchError> {
    let h = 2f64.powf(-(level as f64) / 2.0);
    let t_end = config.t_end.unwrap_or_else(|| problem.t_end_default());
    let constants = config
        .constants
        .unwrap_or_else(|| Constants::with_poincare(problem.domain().diameter() / std::f64::consts::PI));
    let solver = &config.solver;

    let mut mesh = Mesh::macro_mesh(problem.domain());
    mesh.refine_uniform_to(h)?;
    let space = FeSpace::build(&mesh, config.degree)?;
    let tau0 = config.tau_coef * h.powi(config.tau_power);

    let u0 = space.interpolate(|x| problem.initial(x), true)?;
    let initial_error = u0.l2_distance_to(|x| problem.initial(x));
    let mut acc = EstimatorAccumulator::new(initial_error);
    let mut err = ErrorAccumulator::new();
    let mut log: Vec<StepIndicators> = Vec::new();

    let mut prev = TimeState { n: 0, t: 0.0, tau: 0.0, u: u0 };
    let mut prev_bracket = discrete_laplacian(&prev.u, solver)?;
    let mut prev_eps = constants.c0 * elliptic_estimator(&prev.u).global;
    let load_rule = QuadratureRule::with_exactness(2 * config.degree + 2);
    let mut ritz_guess: Option<Vec<f64>> = None;

    let mut t = 0.0;
    while t < t_end - 1e-12 * t_end.max(1.0) {
        let tau = tau0.min(t_end - t);
        let t_next = t + tau;
        let state = backward_euler_from_transferred(
            &prev.u,
            prev.n,
            &space,
            |x| problem.source(x, t_next),
            t_next,
            tau,
            solver,
        )?;
        let eps = constants.c0 * elliptic_estimator(&state.u).global;
        let p0f = l2_project(&space, |x| problem.source(x, t_next), &load_rule, solver)?;
        // fixed mesh: the transferred predecessor is the predecessor itself
        let du = state.u.axpy(-1.0, &prev.u).scaled(1.0 / tau);
        let bracket = p0f.axpy(-1.0, &du);
        let theta_arg = bracket.axpy(-1.0, &prev_bracket);
        let theta = match config.theta_dual {
            DualNormChoice::Ritz => {
                let (norm, psi) =
                    h_minus1_norm_warm(&theta_arg, ritz_guess.as_deref(), solver)?;
                ritz_guess = Some(psi);
                norm / 3f64.sqrt()
            }
            DualNormChoice::Poincare => {
                crate::indicators::poincare_bound(&theta_arg, constants.c_p) / 3f64.sqrt()
            }
        };
        let theta_tilde = theta_tilde_indicator(&mesh, &prev.u, &state.u, constants.c_mu)?;
        let gamma_tilde =
            gamma_tilde_indicator(&mesh, &prev_bracket, &bracket, constants.c_mu_prime)?;
        let ind = StepIndicators {
            n: state.n,
            t: t_next,
            tau,
            dim: space.dim,
            eps,
            eps_tilde: epsilon_tilde(eps, prev_eps, config.epsilon_variant),
            theta,
            theta_tilde,
            gamma: 0.0,
            gamma_tilde,
            beta: 0.0,
        };
        acc.push(&ind);
        log.push(ind);
        err.add_slab(&mesh, &prev, &state, problem)?;
        prev_eps = eps;
        prev_bracket = bracket;
        prev = state;
        t = t_next;
    }

    let error_energy = err.energy();
    let error_final_l2 = prev.u.l2_distance_to(|x| problem.u(x, t_end));
    let theta_cum = match config.theta_variant {
        ThetaVariant::DualNorm => acc.theta_cum(),
        ThetaVariant::Energy => acc.theta_alt_cum(),
    };
    let theta_tilde_cum = log
        .iter()
        .map(|r| r.theta_tilde * r.theta_tilde * r.tau)
        .sum::<f64>()
        .sqrt();
    let gamma_tilde_cum = log
        .iter()
        .map(|r| r.gamma_tilde * r.gamma_tilde * r.tau)
        .sum::<f64>()
        .sqrt();
    let eta = acc.eta();
    Ok((
        LevelResult {
            level,
            h,
            tau: tau0,
            dim: space.dim,
            steps: prev.n,
            e_cum: acc.space_cum(),
            theta_cum,
            theta_tilde_cum,
            gamma_tilde_cum,
            eta,
            error_energy,
            error_final_l2,
            ei: effectivity_index(eta, error_energy),
            initial_error,
        },
        log,
    ))
}

/// Verify f = du/dt - laplace(u) by high-order central differences at
/// interior sample points; returns the worst relative defect.
pub fn manufactured_source_defect(
    problem: &dyn Problem,
    samples: &[([f64; 2], f64)],
) -> f64 {
    let mut worst: f64 = 0.0;
    for &(x, t) in samples {
        let hs = 1e-3;
        let ht = 1e-4;
        let u = |x: [f64; 2], t: f64| problem.u(x, t);
        // 5-point stencils, O(h^4)
        let d2 = |f: &dyn Fn(f64) -> f64, h: f64| {
            (-f(2.0 * h) + 16.0 * f(h) - 30.0 * f(0.0) + 16.0 * f(-h) - f(-2.0 * h))
                / (12.0 * h * h)
        };
        let d1 = |f: &dyn Fn(f64) -> f64, h: f64| {
            (-f(2.0 * h) + 8.0 * f(h) - 8.0 * f(-h) + f(-2.0 * h)) / (12.0 * h)
        };
        let uxx = d2(&|d| u([x[0] + d, x[1]], t), hs);
        let uyy = d2(&|d| u([x[0], x[1] + d], t), hs);
        let ut = d1(&|d| u(x, t + d), ht);
        let f_fd = ut - uxx - uyy;
        let f_exact = problem.source(x, t);
        let scale = f_exact.abs().max(1.0);
        worst = worst.max((f_fd - f_exact).abs() / scale);
    }
    worst
}

/// Convenience constructor for run drivers.
pub fn problem_registry() -> ProblemRegistry {
    ProblemRegistry::with_defaults()
}

/// Shared gradient check used by tests: finite differences of u against grad_u.
pub fn gradient_defect(problem: &dyn Problem, samples: &[([f64; 2], f64)]) -> f64 {
    let mut worst: f64 = 0.0;
    for &(x, t) in samples {
        let h = 1e-5;
        let gx = (problem.u([x[0] + h, x[1]], t) - problem.u([x[0] - h, x[1]], t)) / (2.0 * h);
        let gy = (problem.u([x[0], x[1] + h], t) - problem.u([x[0], x[1] - h], t)) / (2.0 * h);
        let g = problem.grad_u(x, t);
        let scale = (g[0].abs() + g[1].abs()).max(1.0);
        worst = worst.max(((gx - g[0]).abs() + (gy - g[1]).abs()) / scale);
    }
    worst
}

pub type ArcProblem = Arc<dyn Problem>;
