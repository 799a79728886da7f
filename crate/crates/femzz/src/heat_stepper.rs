//! Backward-Euler time stepping, the discrete Laplacian, and the L2
//! projection onto the finite element space.

use std::sync::Arc;

use thiserror::Error;

use crate::fespace::quadrature::QuadratureRule;
use crate::fespace::{transfer, FeError, FeFunction, FeSpace};
use crate::mesh::Mesh;
use crate::sparse::{cg_solve, Preconditioner, SolveError, CG_DEFAULT_REL_TOL};

#[derive(Debug, Error)]
pub enum StepError {
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Space(#[from] FeError),
    #[error("time {0} outside the stepped range [{1}, {2}]")]
    TimeOutOfRange(f64, f64, f64),
}

#[derive(Debug, Clone, Copy)]
pub struct SolverConfig {
    pub rel_tol: f64,
    pub max_iter_factor: usize,
    pub precond: Preconditioner,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            rel_tol: CG_DEFAULT_REL_TOL,
            max_iter_factor: 10,
            precond: Preconditioner::Diagonal,
        }
    }
}

impl SolverConfig {
    fn max_iter(&self, n: usize) -> usize {
        self.max_iter_factor * n.max(10)
    }
}

/// State after step n: time, step size, and the discrete solution.
#[derive(Debug, Clone)]
pub struct TimeState {
    pub n: usize,
    pub t: f64,
    pub tau: f64,
    pub u: FeFunction,
}

/// Solve (M + tau S) u = M (transfer of prev) + tau * load(f(., t_new)) with
/// homogeneous Dirichlet conditions imposed by row/column elimination.
pub fn backward_euler_step<F>(
    mesh: &Mesh,
    prev: &TimeState,
    space: &Arc<FeSpace>,
    f: F,
    t_new: f64,
    tau: f64,
    solver: &SolverConfig,
) -> Result<TimeState, StepError>
where
    F: Fn([f64; 2]) -> f64 + Sync,
{
    let transferred = transfer(mesh, &prev.u, space)?;
    backward_euler_from_transferred(&transferred, prev.n, space, f, t_new, tau, solver)
}

/// Same as [`backward_euler_step`] when the caller already holds the
/// transferred predecessor (it is reused by the error indicators).
pub fn backward_euler_from_transferred<F>(
    transferred: &FeFunction,
    prev_n: usize,
    space: &Arc<FeSpace>,
    f: F,
    t_new: f64,
    tau: f64,
    solver: &SolverConfig,
) -> Result<TimeState, StepError>
where
    F: Fn([f64; 2]) -> f64 + Sync,
{
    let m = space.mass();
    let s = space.stiffness();
    let rule = QuadratureRule::with_exactness(2 * space.degree + 2);
    let load = space.load_vector(f, &rule);

    let mut rhs = m.apply(&transferred.coeffs);
    for (r, &b) in rhs.iter_mut().zip(&load) {
        *r += tau * b;
    }
    let mut sys = m.linear_combination(1.0, &s, tau);
    sys.eliminate_dirichlet(&space.is_boundary);
    zero_constrained(&mut rhs, &space.is_boundary);

    let (mut u, _) = cg_solve(
        &sys,
        &rhs,
        Some(&transferred.coeffs),
        solver.rel_tol,
        solver.max_iter(space.dim),
        solver.precond,
    )?;
    zero_constrained(&mut u, &space.is_boundary);
    Ok(TimeState {
        n: prev_n + 1,
        t: t_new,
        tau,
        u: space.function_from(u)?,
    })
}

/// Discrete Laplacian A V: solve M a = S v on the free DOF, so that
/// <A V, Phi> = a(V, Phi) for all Phi in the space.
pub fn discrete_laplacian(v: &FeFunction, solver: &SolverConfig) -> Result<FeFunction, StepError> {
    let space = &v.space;
    let mut rhs = space.stiffness().apply(&v.coeffs);
    zero_constrained(&mut rhs, &space.is_boundary);
    let mut m = (*space.mass()).clone();
    m.eliminate_dirichlet(&space.is_boundary);
    let (mut a, _) = cg_solve(
        &m,
        &rhs,
        None,
        solver.rel_tol,
        solver.max_iter(space.dim),
        solver.precond,
    )?;
    zero_constrained(&mut a, &space.is_boundary);
    Ok(space.function_from(a)?)
}

/// L2 projection of a point-evaluable function: M p = load(v) on free DOF.
pub fn l2_project<F>(
    space: &Arc<FeSpace>,
    v: F,
    rule: &QuadratureRule,
    solver: &SolverConfig,
) -> Result<FeFunction, StepError>
where
    F: Fn([f64; 2]) -> f64 + Sync,
{
    let mut rhs = space.load_vector(v, rule);
    zero_constrained(&mut rhs, &space.is_boundary);
    let mut m = (*space.mass()).clone();
    m.eliminate_dirichlet(&space.is_boundary);
    let (mut p, _) = cg_solve(
        &m,
        &rhs,
        None,
        solver.rel_tol,
        solver.max_iter(space.dim),
        solver.precond,
    )?;
    zero_constrained(&mut p, &space.is_boundary);
    Ok(space.function_from(p)?)
}

fn zero_constrained(v: &mut [f64], constrained: &[bool]) {
    for (x, &b) in v.iter_mut().zip(constrained) {
        if b {
            *x = 0.0;
        }
    }
}

/// Hat-function weights of the piecewise linear time extension at time t
/// within the slab [t_prev, t_cur]: U(t) = w_prev U_prev + w_cur U_cur.
pub fn extension_weights(t_prev: f64, t_cur: f64, t: f64) -> Result<(f64, f64), StepError> {
    if t < t_prev - 1e-12 || t > t_cur + 1e-12 {
        return Err(StepError::TimeOutOfRange(t, t_prev, t_cur));
    }
    let tau = t_cur - t_prev;
    let l_cur = ((t - t_prev) / tau).clamp(0.0, 1.0);
    Ok((1.0 - l_cur, l_cur))
}

/// Evaluate the time extension on the common refinement of two consecutive
/// states' spaces; returns the blended function on that space.
pub fn time_extension_eval(
    mesh: &Mesh,
    prev: &TimeState,
    cur: &TimeState,
    t: f64,
) -> Result<FeFunction, StepError> {
    let (w_prev, w_cur) = extension_weights(prev.t, cur.t, t)?;
    let cr_leaves = mesh.common_refinement(&prev.u.space.leaves, &cur.u.space.leaves);
    let cr = FeSpace::on_section(mesh, cr_leaves, cur.u.space.degree)?;
    let a = transfer(mesh, &prev.u, &cr)?;
    let b = transfer(mesh, &cur.u, &cr)?;
    Ok(a.scaled(w_prev).axpy(w_cur, &b))
}
