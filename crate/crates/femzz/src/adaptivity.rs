//! The space-adaptive solve (coarsen once, then maximum-strategy refinement
//! sweeps) and the timestep controllers, selectable by name.

use std::sync::Arc;

use thiserror::Error;

use crate::benchmarks::{BenchError, ErrorAccumulator, Problem};
use crate::coarsen_predict::{coarsening_preindicator, PredictError};
use crate::fespace::quadrature::QuadratureRule;
use crate::fespace::{transfer, FeError, FeFunction, FeSpace};
use crate::heat_stepper::{
    backward_euler_from_transferred, discrete_laplacian, l2_project, SolverConfig, StepError,
    TimeState,
};
use crate::indicators::{
    beta_indicator, epsilon_tilde, gamma_indicator, gamma_tilde_indicator, theta_indicator,
    theta_tilde_indicator, Constants, DualNormChoice, EpsilonVariant, EstimatorAccumulator,
    StepIndicators,
};
use crate::mesh::{ElemId, Mesh, MeshError};
use crate::recovery::elliptic_estimator;

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error(transparent)]
    Step(#[from] StepError),
    #[error(transparent)]
    Space(#[from] FeError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Predict(#[from] PredictError),
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("timestep underflow at t = {t:.6e} (tau = {tau:.6e})")]
    TauUnderflow {
        t: f64,
        tau: f64,
        partial: Box<AdaptiveRun>,
    },
}

/// Tolerances and knobs of the adaptive algorithms.
#[derive(Debug, Clone)]
pub struct AdaptConfig {
    pub degree: usize,
    pub tol_eps: f64,
    pub tol_gamma: f64,
    pub tol_theta: f64,
    pub tol_theta_min: f64,
    /// Maximum-strategy marking threshold in [0, 1].
    pub xi: f64,
    /// Refinement sweeps per step.
    pub k_max: usize,
    pub tau0: f64,
    pub t_end: f64,
    pub constants: Option<Constants>,
    pub epsilon_variant: EpsilonVariant,
    pub solver: SolverConfig,
    pub snapshot_times: Vec<f64>,
    /// Abort threshold: tau below this factor times t_end fails the run.
    pub tau_min_factor: f64,
    /// Redo cap for the implicit controller.
    pub max_redos: usize,
    /// Uniformly pre-refine the macro mesh to this mesh size before starting.
    pub initial_h: Option<f64>,
    /// Dual-norm strategy for the theta and gamma indicators.
    pub theta_dual: DualNormChoice,
}

impl AdaptConfig {
    pub fn new(degree: usize, tau0: f64, t_end: f64) -> Self {
        AdaptConfig {
            degree,
            tol_eps: f64::INFINITY,
            tol_gamma: 0.0,
            tol_theta: f64::INFINITY,
            tol_theta_min: 1e-12,
            xi: 0.7,
            k_max: 20,
            tau0,
            t_end,
            constants: None,
            epsilon_variant: EpsilonVariant::EndpointMean,
            solver: SolverConfig::default(),
            snapshot_times: Vec::new(),
            tau_min_factor: 1e-8,
            max_redos: 20,
            initial_h: None,
            theta_dual: DualNormChoice::Ritz,
        }
    }

    /// Global tolerance implied by the per-indicator tolerances.
    pub fn global_tolerance(&self) -> f64 {
        (self.t_end
            * (self.tol_theta * self.tol_theta
                + self.tol_eps * self.tol_eps
                + self.tol_gamma * self.tol_gamma))
            .sqrt()
    }

    pub fn validate(&self) -> Result<(), AdaptError> {
        if !(1..=4).contains(&self.degree) {
            return Err(AdaptError::BadConfig(format!("degree {} not in 1..=4", self.degree)));
        }
        if !(0.0..=1.0).contains(&self.xi) {
            return Err(AdaptError::BadConfig(format!("xi {} not in [0,1]", self.xi)));
        }
        if self.tau0 <= 0.0 || self.t_end <= 0.0 {
            return Err(AdaptError::BadConfig("tau0 and t_end must be positive".into()));
        }
        if !(self.tol_theta_min > 0.0 && self.tol_theta_min < self.tol_theta) {
            return Err(AdaptError::BadConfig(
                "need 0 < tol_theta_min < tol_theta".into(),
            ));
        }
        Ok(())
    }

    fn resolved_constants(&self, problem: &dyn Problem) -> Constants {
        self.constants.unwrap_or_else(|| {
            Constants::with_poincare(problem.domain().diameter() / std::f64::consts::PI)
        })
    }
}

/// Next-step timestep decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TauAdjust {
    Shrink,
    Keep,
    Grow,
}

/// Timestep control strategies of the adaptive driver.
pub trait TimestepController: Send + Sync {
    fn name(&self) -> &'static str;
    /// Re-solve the current step with a smaller timestep?
    fn redo(&self, theta: f64, cfg: &AdaptConfig) -> bool;
    /// How the next step's timestep moves on the sqrt(2) ladder.
    fn adjust(&self, theta: f64, cfg: &AdaptConfig) -> TauAdjust;
}

/// Accept every step; shrink or grow the next timestep from theta_n.
pub struct ExplicitControl;

impl TimestepController for ExplicitControl {
    fn name(&self) -> &'static str {
        "explicit"
    }
    fn redo(&self, _theta: f64, _cfg: &AdaptConfig) -> bool {
        false
    }
    fn adjust(&self, theta: f64, cfg: &AdaptConfig) -> TauAdjust {
        if theta > cfg.tol_theta {
            TauAdjust::Shrink
        } else if theta <= cfg.tol_theta_min {
            TauAdjust::Grow
        } else {
            TauAdjust::Keep
        }
    }
}

/// Repeat the step with tau/sqrt(2) until theta_n passes (or the redo cap).
pub struct ImplicitControl;

impl TimestepController for ImplicitControl {
    fn name(&self) -> &'static str {
        "implicit"
    }
    fn redo(&self, theta: f64, cfg: &AdaptConfig) -> bool {
        theta > cfg.tol_theta
    }
    fn adjust(&self, theta: f64, cfg: &AdaptConfig) -> TauAdjust {
        if theta <= cfg.tol_theta_min {
            TauAdjust::Grow
        } else {
            TauAdjust::Keep
        }
    }
}

/// Fixed timestep.
pub struct UniformControl;

impl TimestepController for UniformControl {
    fn name(&self) -> &'static str {
        "uniform"
    }
    fn redo(&self, _theta: f64, _cfg: &AdaptConfig) -> bool {
        false
    }
    fn adjust(&self, _theta: f64, _cfg: &AdaptConfig) -> TauAdjust {
        TauAdjust::Keep
    }
}

pub const CONTROLLER_NAMES: &[&str] = &["explicit", "implicit", "uniform"];

pub fn controller_by_name(name: &str) -> Option<Box<dyn TimestepController>> {
    match name {
        "explicit" => Some(Box::new(ExplicitControl)),
        "implicit" => Some(Box::new(ImplicitControl)),
        "uniform" => Some(Box::new(UniformControl)),
        _ => None,
    }
}

/// Result of one space-adaptive solve.
pub struct SpaceAdaptOutcome {
    pub space: Arc<FeSpace>,
    pub state: TimeState,
    pub transferred: FeFunction,
    /// C0-scaled global elliptic indicator.
    pub eps: f64,
    pub eps_leaf_sq: Vec<f64>,
    pub coarsened: bool,
    /// Sum of the selected patches' predicted squared losses.
    pub coarsen_loss: f64,
    pub sweeps: usize,
    pub hit_kmax: bool,
}

/// One timestep of Space Adapt: coarsen once within the gamma budget, then
/// solve-estimate-mark-refine until the elliptic indicator passes or the
/// sweep cap is hit.
pub fn space_adapt<F>(
    mesh: &mut Mesh,
    prev: &TimeState,
    f: F,
    t_new: f64,
    tau: f64,
    cfg: &AdaptConfig,
    constants: &Constants,
) -> Result<SpaceAdaptOutcome, AdaptError>
where
    F: Fn([f64; 2]) -> f64 + Sync,
{
    let mut coarsened = false;
    let mut coarsen_loss = 0.0;
    if cfg.tol_gamma > 0.0 && prev.n > 0 {
        let pre = coarsening_preindicator(&prev.u, mesh)?;
        let mut patches = pre.patches;
        patches.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.vertex.cmp(&b.0.vertex)));
        let budget = cfg.tol_gamma * cfg.tol_gamma;
        let mut selected = Vec::new();
        let mut sum = 0.0;
        for (patch, loss) in patches {
            if sum + loss <= budget {
                sum += loss;
                selected.push(patch);
            } else {
                break;
            }
        }
        if !selected.is_empty() {
            let report = mesh.coarsen(&selected);
            coarsened = report.applied > 0;
            coarsen_loss = sum;
        }
    }

    let mut sweeps = 0;
    loop {
        let space = FeSpace::build(mesh, cfg.degree)?;
        let transferred = transfer(mesh, &prev.u, &space)?;
        let state = backward_euler_from_transferred(
            &transferred,
            prev.n,
            &space,
            &f,
            t_new,
            tau,
            &cfg.solver,
        )?;
        let est = elliptic_estimator(&state.u);
        let eps = constants.c0 * est.global;
        let c0_sq = constants.c0 * constants.c0;
        let eps_leaf_sq: Vec<f64> = est.per_leaf_sq.iter().map(|&s| c0_sq * s).collect();

        if eps <= cfg.tol_eps || sweeps >= cfg.k_max {
            let hit_kmax = eps > cfg.tol_eps;
            return Ok(SpaceAdaptOutcome {
                space,
                state,
                transferred,
                eps,
                eps_leaf_sq,
                coarsened,
                coarsen_loss,
                sweeps,
                hit_kmax,
            });
        }
        let max_sq = eps_leaf_sq.iter().fold(0.0f64, |a, &b| a.max(b));
        let marked: Vec<ElemId> = space
            .leaves
            .iter()
            .zip(&eps_leaf_sq)
            .filter(|&(_, &s)| s >= cfg.xi * max_sq && s > 0.0)
            .map(|(&e, _)| e)
            .collect();
        if marked.is_empty() {
            return Ok(SpaceAdaptOutcome {
                space,
                state,
                transferred,
                eps,
                eps_leaf_sq,
                coarsened,
                coarsen_loss,
                sweeps,
                hit_kmax: false,
            });
        }
        mesh.refine(&marked)?;
        sweeps += 1;
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct SnapshotRecord {
    pub t: f64,
    pub n: usize,
    pub dim: usize,
    pub mesh_text: String,
}

#[derive(Debug, Default)]
pub struct AdaptiveRun {
    pub log: Vec<StepIndicators>,
    pub acc: EstimatorAccumulator,
    pub steps: usize,
    /// Sum of dim V^n over accepted steps.
    pub total_dof: usize,
    pub redo_count: usize,
    pub redo_limit_hits: usize,
    pub kmax_hits: usize,
    pub snapshots: Vec<SnapshotRecord>,
    pub error_energy: Option<f64>,
    pub error_final_l2: Option<f64>,
    pub ei_final: Option<f64>,
    pub final_dim: usize,
}

/// March the adaptive scheme from 0 to t_end with the given controller.
pub fn run_adaptive(
    problem: &dyn Problem,
    cfg: &AdaptConfig,
    controller: &dyn TimestepController,
) -> Result<AdaptiveRun, AdaptError> {
    cfg.validate()?;
    let constants = cfg.resolved_constants(problem);
    let dual = cfg.theta_dual.resolve(constants.c_p);
    let solver = &cfg.solver;
    let load_rule = QuadratureRule::with_exactness(2 * cfg.degree + 2);
    let tau_min = cfg.tau_min_factor * cfg.t_end;

    let mut mesh = Mesh::macro_mesh(problem.domain());
    if let Some(h) = cfg.initial_h {
        mesh.refine_uniform_to(h)?;
    }
    let space0 = initial_space_adapt(&mut mesh, problem, cfg)?;
    let u0 = space0.interpolate(|x| problem.initial(x), true)?;
    let initial_error = u0.l2_distance_to(|x| problem.initial(x));

    let mut run = AdaptiveRun {
        acc: EstimatorAccumulator::new(initial_error),
        ..Default::default()
    };
    let mut err_acc = ErrorAccumulator::new();

    let mut prev = TimeState { n: 0, t: 0.0, tau: 0.0, u: u0 };
    let mut prev_bracket = discrete_laplacian(&prev.u, solver)?;
    let mut prev_eps = constants.c0 * elliptic_estimator(&prev.u).global;

    let mut ladder: i32 = 0; // tau = tau0 * sqrt(2)^ladder
    let mut snapshot_idx = 0;
    let mut snapshot_times = cfg.snapshot_times.clone();
    snapshot_times.sort_by(f64::total_cmp);

    let mut t = 0.0;
    while t < cfg.t_end - 1e-12 * cfg.t_end {
        let mut tau = ladder_tau(cfg.tau0, ladder);
        if tau < tau_min {
            return Err(AdaptError::TauUnderflow { t, tau, partial: Box::new(run) });
        }
        let mut redos = 0;
        let (outcome, p0f, bracket, theta) = loop {
            let tau_eff = tau.min(cfg.t_end - t);
            let t_next = t + tau_eff;
            let outcome = space_adapt(
                &mut mesh,
                &prev,
                |x| problem.source(x, t_next),
                t_next,
                tau_eff,
                cfg,
                &constants,
            )?;
            // parabolic bracket w_n = P0 f^n - (U^n - Lambda U^{n-1}) / tau
            let p0f = l2_project(
                &outcome.space,
                |x| problem.source(x, t_next),
                &load_rule,
                solver,
            )?;
            let du = outcome
                .state
                .u
                .axpy(-1.0, &outcome.transferred)
                .scaled(1.0 / tau_eff);
            let bracket = p0f.axpy(-1.0, &du);
            let theta = theta_indicator(&mesh, &prev_bracket, &bracket, dual.as_ref(), solver)?;

            if controller.redo(theta, cfg) {
                if redos >= cfg.max_redos {
                    run.redo_limit_hits += 1;
                    break (outcome, p0f, bracket, theta);
                }
                let next_tau = ladder_tau(cfg.tau0, ladder - 1);
                if next_tau < tau_min {
                    return Err(AdaptError::TauUnderflow {
                        t,
                        tau: next_tau,
                        partial: Box::new(run),
                    });
                }
                // rewind the mesh to the previous step's triangulation
                mesh.set_section(&prev.u.space.leaves);
                ladder -= 1;
                tau = next_tau;
                redos += 1;
                run.redo_count += 1;
                continue;
            }
            break (outcome, p0f, bracket, theta);
        };

        let state = outcome.state;
        let tau_eff = state.tau;
        let t_next = state.t;
        let gamma = gamma_indicator(
            &mesh,
            &prev.u,
            &outcome.transferred,
            tau_eff,
            outcome.coarsened,
            dual.as_ref(),
            solver,
        )?;
        let theta_tilde = theta_tilde_indicator(&mesh, &prev.u, &state.u, constants.c_mu)?;
        let gamma_tilde =
            gamma_tilde_indicator(&mesh, &prev_bracket, &bracket, constants.c_mu_prime)?;
        let beta = beta_indicator(&p0f, |x, s| problem.source(x, s), t, t_next, constants.c_p);

        let ind = StepIndicators {
            n: state.n,
            t: t_next,
            tau: tau_eff,
            dim: outcome.space.dim,
            eps: outcome.eps,
            eps_tilde: epsilon_tilde(outcome.eps, prev_eps, cfg.epsilon_variant),
            theta,
            theta_tilde,
            gamma,
            gamma_tilde,
            beta,
        };
        run.acc.push(&ind);
        run.log.push(ind);
        run.total_dof += outcome.space.dim;
        run.final_dim = outcome.space.dim;
        run.steps += 1;
        if outcome.hit_kmax {
            run.kmax_hits += 1;
        }
        err_acc.add_slab(&mesh, &prev, &state, problem)?;

        while snapshot_idx < snapshot_times.len()
            && t_next >= snapshot_times[snapshot_idx] - 1e-12
        {
            run.snapshots.push(SnapshotRecord {
                t: t_next,
                n: state.n,
                dim: outcome.space.dim,
                mesh_text: mesh.write_snapshot(),
            });
            snapshot_idx += 1;
        }

        match controller.adjust(theta, cfg) {
            TauAdjust::Shrink => ladder -= 1,
            TauAdjust::Grow => ladder += 1,
            TauAdjust::Keep => {}
        }
        prev_eps = outcome.eps;
        prev_bracket = bracket;
        prev = state;
        t = t_next;
    }

    run.error_energy = Some(err_acc.energy());
    let t_end = cfg.t_end;
    run.error_final_l2 = Some(prev.u.l2_distance_to(|x| problem.u(x, t_end)));
    run.ei_final = run
        .error_energy
        .filter(|&e| e > 0.0)
        .map(|e| run.acc.eta() / e);
    Ok(run)
}

fn ladder_tau(tau0: f64, ladder: i32) -> f64 {
    tau0 * std::f64::consts::SQRT_2.powi(ladder)
}

/// Initial mesh adaptation driven by the interpolation error of the initial
/// datum, with the same maximum-strategy marking as the in-step loop.
fn initial_space_adapt(
    mesh: &mut Mesh,
    problem: &dyn Problem,
    cfg: &AdaptConfig,
) -> Result<Arc<FeSpace>, AdaptError> {
    let overkill = QuadratureRule::overkill();
    let mut sweeps = 0;
    loop {
        let space = FeSpace::build(mesh, cfg.degree)?;
        let u0 = space.interpolate(|x| problem.initial(x), true)?;
        // per-leaf squared interpolation error
        let err_sq: Vec<f64> = (0..space.leaves.len())
            .map(|pos| {
                let area = space.leaf_area(pos);
                let c = space.leaf_coords(pos);
                let mut acc = 0.0;
                for (pt, w) in overkill.points.iter().zip(&overkill.weights) {
                    let x = [
                        pt[0] * c[0][0] + pt[1] * c[1][0] + pt[2] * c[2][0],
                        pt[0] * c[0][1] + pt[1] * c[1][1] + pt[2] * c[2][1],
                    ];
                    let d = u0.eval(pos, *pt).expect("point inside element")
                        - problem.initial(x);
                    acc += w * d * d;
                }
                acc * area
            })
            .collect();
        let global = err_sq.iter().sum::<f64>().max(0.0).sqrt();
        if global <= cfg.tol_eps || sweeps >= cfg.k_max {
            return Ok(space);
        }
        let max_sq = err_sq.iter().fold(0.0f64, |a, &b| a.max(b));
        let marked: Vec<ElemId> = space
            .leaves
            .iter()
            .zip(&err_sq)
            .filter(|&(_, &s)| s >= cfg.xi * max_sq && s > 0.0)
            .map(|(&e, _)| e)
            .collect();
        if marked.is_empty() {
            return Ok(space);
        }
        mesh.refine(&marked)?;
        sweeps += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmarks::problem_registry;

    #[test]
    fn controller_registry() {
        for name in CONTROLLER_NAMES {
            assert_eq!(controller_by_name(name).unwrap().name(), *name);
        }
        assert!(controller_by_name("nope").is_none());
    }

    #[test]
    fn explicit_controller_rules() {
        let cfg = {
            let mut c = AdaptConfig::new(1, 0.1, 1.0);
            c.tol_theta = 1.0;
            c.tol_theta_min = 0.1;
            c
        };
        let ctl = ExplicitControl;
        assert_eq!(ctl.adjust(2.0, &cfg), TauAdjust::Shrink);
        assert_eq!(ctl.adjust(0.05, &cfg), TauAdjust::Grow);
        assert_eq!(ctl.adjust(0.5, &cfg), TauAdjust::Keep);
        assert!(!ctl.redo(5.0, &cfg));
        let imp = ImplicitControl;
        assert!(imp.redo(2.0, &cfg));
        assert!(!imp.redo(0.5, &cfg));
        assert_eq!(imp.adjust(0.05, &cfg), TauAdjust::Grow);
        assert_eq!(imp.adjust(0.5, &cfg), TauAdjust::Keep);
    }

    #[test]
    fn config_validation() {
        let mut cfg = AdaptConfig::new(1, 0.1, 1.0);
        cfg.tol_theta = 0.1;
        cfg.tol_theta_min = 0.2;
        assert!(cfg.validate().is_err());
        cfg.tol_theta_min = 0.05;
        assert!(cfg.validate().is_ok());
        cfg.xi = 1.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn global_tolerance_relation() {
        let mut cfg = AdaptConfig::new(1, 0.1, 2.0);
        cfg.tol_eps = 0.3;
        cfg.tol_theta = 0.4;
        cfg.tol_gamma = 0.0;
        let tol = cfg.global_tolerance();
        assert!((tol * tol - 2.0 * (0.09 + 0.16)).abs() < 1e-14);
    }

    #[test]
    fn infinite_tolerances_do_not_refine() {
        let reg = problem_registry();
        let p1 = reg.create("p1").unwrap();
        let mut cfg = AdaptConfig::new(1, 0.05, 0.2);
        cfg.tol_eps = f64::INFINITY;
        cfg.tol_gamma = 0.0;
        cfg.tol_theta = f64::INFINITY;
        cfg.tol_theta_min = 1.0;
        let run = run_adaptive(p1.as_ref(), &cfg, &UniformControl).unwrap();
        assert_eq!(run.steps, 4);
        assert_eq!(run.kmax_hits, 0);
        // every step ran zero sweeps on the macro mesh
        for row in &run.log {
            assert_eq!(row.dim, 5);
        }
    }

    #[test]
    fn xi_one_marks_only_maximal_elements() {
        // the corner problem concentrates the indicator, so xi = 1 refines
        // only near the maximum (plus closure); xi = 0 refines everywhere
        let reg = problem_registry();
        let p3 = reg.create("p3").unwrap();
        let run_with_xi = |xi: f64| {
            let mut mesh = Mesh::macro_mesh(p3.domain());
            mesh.refine_all().unwrap();
            let space = FeSpace::build(&mesh, 1).unwrap();
            let u0 = space.interpolate(|x| p3.initial(x), true).unwrap();
            let prev = TimeState { n: 0, t: 0.0, tau: 0.0, u: u0 };
            let mut cfg = AdaptConfig::new(1, 0.05, 0.2);
            cfg.xi = xi;
            cfg.k_max = 1;
            cfg.tol_eps = 1e-12;
            let constants = Constants::with_poincare(1.0);
            let before = mesh.num_leaves();
            let outcome = space_adapt(
                &mut mesh,
                &prev,
                |x| p3.source(x, 0.05),
                0.05,
                0.05,
                &cfg,
                &constants,
            )
            .unwrap();
            assert_eq!(outcome.sweeps, 1);
            (before, mesh.num_leaves())
        };
        let (before, after_max) = run_with_xi(1.0);
        let (_, after_all) = run_with_xi(0.0);
        // xi = 0 bisects every leaf: exactly doubles
        assert_eq!(after_all, 2 * before);
        // xi = 1 refines strictly less than uniformly
        assert!(after_max > before && after_max < after_all, "{after_max}");
    }

    #[test]
    fn tol_gamma_zero_never_coarsens() {
        let reg = problem_registry();
        let p1 = reg.create("p1").unwrap();
        let mut cfg = AdaptConfig::new(1, 0.05, 0.15);
        cfg.tol_eps = 0.5;
        cfg.tol_gamma = 0.0;
        cfg.k_max = 3;
        let run = run_adaptive(p1.as_ref(), &cfg, &ExplicitControl).unwrap();
        for row in &run.log {
            assert_eq!(row.gamma, 0.0);
        }
    }

    #[test]
    fn timestep_ladder_values() {
        // theta always above tol_theta: tau marches down the sqrt(2) ladder
        let reg = problem_registry();
        let p2 = reg.create("p2").unwrap();
        // t_end below the geometric tau sum so the march terminates
        let mut cfg = AdaptConfig::new(1, 0.02, 0.05);
        cfg.tol_eps = f64::INFINITY;
        cfg.tol_theta = 1e-300; // everything exceeds it
        cfg.tol_theta_min = 1e-301;
        let run = run_adaptive(p2.as_ref(), &cfg, &ExplicitControl).unwrap();
        let sqrt2 = std::f64::consts::SQRT_2;
        for (i, row) in run.log.iter().enumerate() {
            // skip the final clipped step
            if row.t < cfg.t_end - 1e-12 {
                let expect = 0.02 * sqrt2.powi(-(i as i32));
                assert!(
                    (row.tau - expect).abs() < 1e-15 + 1e-12 * expect,
                    "step {i}: tau {} vs {}",
                    row.tau,
                    expect
                );
            }
        }
        assert!(run.redo_count == 0);
    }

    #[test]
    fn implicit_redoes_and_explicit_does_not() {
        let reg = problem_registry();
        let p2 = reg.create("p2").unwrap();
        let mut cfg = AdaptConfig::new(1, 0.05, 0.1);
        cfg.tol_eps = 1.0;
        cfg.k_max = 2;
        // pick tolerances that the first coarse trial will violate
        // (theta_1 is about 1.27 for this setup)
        cfg.tol_theta = 1.0;
        cfg.tol_theta_min = 0.1;
        let explicit = run_adaptive(p2.as_ref(), &cfg, &ExplicitControl).unwrap();
        assert_eq!(explicit.redo_count, 0);
        let implicit = run_adaptive(p2.as_ref(), &cfg, &ImplicitControl).unwrap();
        // the fast problem at tau = 0.05 = half a period must trip the redo
        assert!(implicit.redo_count >= 1, "no redo happened");
        // implicit never accepts theta above tol (unless the cap was hit)
        if implicit.redo_limit_hits == 0 {
            for row in &implicit.log {
                assert!(row.theta <= cfg.tol_theta + 1e-12);
            }
        }
    }

    #[test]
    fn loose_theta_tolerance_grows_tau_monotonically() {
        // smooth slow problem, generous tolerances: the ladder climbs every
        // step until the final clip
        let reg = problem_registry();
        let p1 = reg.create("p1").unwrap();
        let mut cfg = AdaptConfig::new(1, 0.01, 0.3);
        cfg.tol_eps = f64::INFINITY;
        cfg.tol_theta = 100.0;
        cfg.tol_theta_min = 50.0; // everything is below: always grow
        let run = run_adaptive(p1.as_ref(), &cfg, &ExplicitControl).unwrap();
        let mut prev_tau = 0.0;
        for row in &run.log {
            if row.t < cfg.t_end - 1e-12 {
                assert!(row.tau > prev_tau - 1e-15, "tau not growing: {}", row.tau);
                prev_tau = row.tau;
            }
        }
        assert!(run.log.len() >= 3);
    }

    #[test]
    fn implicit_with_infinite_tolerance_never_redoes() {
        let reg = problem_registry();
        let p2 = reg.create("p2").unwrap();
        let mut cfg = AdaptConfig::new(1, 0.02, 0.1);
        cfg.tol_eps = 1.0;
        cfg.k_max = 2;
        cfg.tol_theta = f64::INFINITY;
        cfg.tol_theta_min = 1e-12; // never grow either: uniform tau
        let run = run_adaptive(p2.as_ref(), &cfg, &ImplicitControl).unwrap();
        assert_eq!(run.redo_count, 0);
        for row in &run.log {
            assert!((row.tau - 0.02).abs() < 1e-15);
        }
    }

    #[test]
    fn underflow_aborts_with_partial_log() {
        let reg = problem_registry();
        let p1 = reg.create("p1").unwrap();
        let mut cfg = AdaptConfig::new(1, 0.05, 1.0);
        cfg.tol_eps = f64::INFINITY;
        cfg.tol_theta = 1e-300;
        cfg.tol_theta_min = 1e-301;
        cfg.tau_min_factor = 1e-3; // trip quickly under repeated shrinking
        match run_adaptive(p1.as_ref(), &cfg, &ExplicitControl) {
            Err(AdaptError::TauUnderflow { partial, .. }) => {
                assert!(partial.steps > 0);
            }
            other => panic!("expected underflow, got {:?}", other.map(|r| r.steps)),
        }
    }

    #[test]
    fn snapshots_are_recorded_at_times() {
        let reg = problem_registry();
        let p1 = reg.create("p1").unwrap();
        let mut cfg = AdaptConfig::new(1, 0.05, 0.2);
        cfg.snapshot_times = vec![0.1, 0.2];
        let run = run_adaptive(p1.as_ref(), &cfg, &UniformControl).unwrap();
        assert_eq!(run.snapshots.len(), 2);
        assert!(run.snapshots[0].t >= 0.1 - 1e-12);
        assert!(run.snapshots[0].mesh_text.starts_with("femzz-mesh v1"));
    }

    #[test]
    fn accumulator_matches_log_recomputation() {
        let reg = problem_registry();
        let p1 = reg.create("p1").unwrap();
        let mut cfg = AdaptConfig::new(1, 0.04, 0.2);
        cfg.tol_eps = 0.3;
        cfg.tol_gamma = 1e-3;
        cfg.k_max = 4;
        cfg.tol_theta = 5.0;
        cfg.tol_theta_min = 1e-4;
        let run = run_adaptive(p1.as_ref(), &cfg, &ExplicitControl).unwrap();
        let eta_sq: f64 = run
            .log
            .iter()
            .map(|r| {
                let s = r.eps_tilde + r.gamma + r.beta + r.theta;
                s * s * r.tau
            })
            .sum();
        let rel = (eta_sq.sqrt() - run.acc.eta()).abs() / run.acc.eta().max(1e-300);
        assert!(rel < 1e-12, "accumulator drift {rel}");
    }
}
