//! Coarsening error preindicator: predict, per coarsenable patch, the L2 loss
//! that un-bisecting it would inflict on a finite element function, without
//! mutating the mesh.
//!
//! The machinery lives on the reference bisection pair: the coarse-on-fine
//! matrices express the parent's Lagrange basis in each child's basis, and the
//! fine/coarse index maps record which child DOF survive coarsening.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use thiserror::Error;

use crate::fespace::basis::{local_dof_count, ReferenceBasis, TabulatedBasis, MAX_DEGREE};
use crate::fespace::FeFunction;
use crate::mesh::{CoarsenPatch, ElemId, Mesh};

#[derive(Debug, Error)]
pub enum PredictError {
    #[error("unsupported polynomial degree {0} (supported: 1..=4)")]
    UnsupportedDegree(usize),
    #[error("shared DOF {index} disagrees between siblings: {left} vs {right}")]
    SharedDofMismatch { index: usize, left: f64, right: f64 },
    #[error("function space does not cover element {0}")]
    MissingElement(ElemId),
}

/// Coarse-on-fine matrices and DOF maps for one polynomial degree.
///
/// `a_plus[i][j]` is the parent basis function i evaluated at child-0 node j;
/// `c_plus[j]` maps a surviving child-0 node to its coarse index, and
/// `d_plus[i]` is the inverse. Same for the minus child.
#[derive(Debug)]
pub struct CoarseOnFine {
    pub degree: usize,
    pub a_plus: Vec<Vec<f64>>,
    pub a_minus: Vec<Vec<f64>>,
    pub c_plus: Vec<Option<usize>>,
    pub c_minus: Vec<Option<usize>>,
    pub d_plus: Vec<Option<usize>>,
    pub d_minus: Vec<Option<usize>>,
    /// Normalised reference mass matrix: local mass = |K| * ref_mass.
    ref_mass: Vec<Vec<f64>>,
}

/// Barycentric coordinates of the child vertices within the parent:
/// child 0 = (v2, v0, m), child 1 = (v1, v2, m).
const CHILD_VERTS: [[[f64; 3]; 3]; 2] = [
    [[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.5, 0.5, 0.0]],
    [[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.5, 0.5, 0.0]],
];

impl CoarseOnFine {
    pub fn get(degree: usize) -> Arc<CoarseOnFine> {
        static CACHE: OnceLock<Mutex<HashMap<usize, Arc<CoarseOnFine>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        let mut guard = cache.lock().unwrap();
        guard
            .entry(degree)
            .or_insert_with(|| Arc::new(Self::build(degree).expect("degree checked by callers")))
            .clone()
    }

    pub fn build(degree: usize) -> Result<CoarseOnFine, PredictError> {
        if !(1..=MAX_DEGREE).contains(&degree) {
            return Err(PredictError::UnsupportedDegree(degree));
        }
        let basis = ReferenceBasis::get(degree);
        let n = local_dof_count(degree);
        let mut a = [vec![vec![0.0; n]; n], vec![vec![0.0; n]; n]];
        let mut c = [vec![None; n], vec![None; n]];
        let mut d = [vec![None; n], vec![None; n]];
        for child in 0..2 {
            for (j, node) in basis.nodes.iter().enumerate() {
                // position of fine node j in parent barycentric coordinates
                let mut parent = [0.0; 3];
                for k in 0..3 {
                    for (axis, p) in parent.iter_mut().enumerate() {
                        *p += node[k] * CHILD_VERTS[child][k][axis];
                    }
                }
                let vals = basis.eval(parent);
                for i in 0..n {
                    a[child][i][j] = vals[i];
                }
                // does the fine node coincide with a coarse node?
                for (i, coarse) in basis.nodes.iter().enumerate() {
                    if coarse
                        .iter()
                        .zip(&parent)
                        .all(|(&x, &y)| (x - y).abs() < 1e-12)
                    {
                        c[child][j] = Some(i);
                        d[child][i] = Some(j);
                    }
                }
            }
        }
        // C+ union C- covers all coarse DOF
        for i in 0..n {
            assert!(
                d[0][i].is_some() || d[1][i].is_some(),
                "coarse DOF {i} unreachable from the children"
            );
        }
        let tab = TabulatedBasis::get(degree, 2 * degree);
        let mut ref_mass = vec![vec![0.0; n]; n];
        for (q, w) in tab.rule.weights.iter().enumerate() {
            for i in 0..n {
                for j in 0..n {
                    ref_mass[i][j] += w * tab.val[q][i] * tab.val[q][j];
                }
            }
        }
        let [a_plus, a_minus] = a;
        let [c_plus, c_minus] = c;
        let [d_plus, d_minus] = d;
        Ok(CoarseOnFine {
            degree,
            a_plus,
            a_minus,
            c_plus,
            c_minus,
            d_plus,
            d_minus,
            ref_mass,
        })
    }

    fn matrix(&self, child: usize) -> &Vec<Vec<f64>> {
        if child == 0 {
            &self.a_plus
        } else {
            &self.a_minus
        }
    }

    fn fine_to_coarse(&self, child: usize) -> &[Option<usize>] {
        if child == 0 {
            &self.c_plus
        } else {
            &self.c_minus
        }
    }

    /// Restrict a parent-local coefficient vector to one child (exact, the
    /// function is a polynomial on both).
    pub fn prolongate(&self, parent_vals: &[f64], child: usize) -> Vec<f64> {
        let a = self.matrix(child);
        let n = parent_vals.len();
        (0..n)
            .map(|j| (0..n).map(|i| parent_vals[i] * a[i][j]).sum())
            .collect()
    }

    /// Assemble the coarse local vector from the children's values: surviving
    /// DOF keep their value, all others are dropped. Shared DOF must agree.
    pub fn assemble_y(&self, y_plus: &[f64], y_minus: &[f64]) -> Result<Vec<f64>, PredictError> {
        let n = y_plus.len();
        let mut y = vec![0.0; n];
        for i in 0..n {
            match (self.d_plus[i], self.d_minus[i]) {
                (Some(jp), Some(jm)) => {
                    let (a, b) = (y_plus[jp], y_minus[jm]);
                    let scale = 1.0f64.max(a.abs()).max(b.abs());
                    if (a - b).abs() > 1e-12 * scale {
                        return Err(PredictError::SharedDofMismatch {
                            index: i,
                            left: a,
                            right: b,
                        });
                    }
                    y[i] = a;
                }
                (Some(jp), None) => y[i] = y_plus[jp],
                (None, Some(jm)) => y[i] = y_minus[jm],
                (None, None) => unreachable!("checked at build time"),
            }
        }
        Ok(y)
    }

    /// Residual coefficients of the would-be coarsening error on each child:
    /// r_j = y_j - y^T A_j for non-surviving j, zero otherwise.
    pub fn coarsening_error_local(
        &self,
        y_plus: &[f64],
        y_minus: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>), PredictError> {
        let y = self.assemble_y(y_plus, y_minus)?;
        let n = y.len();
        let mut out = (vec![0.0; n], vec![0.0; n]);
        for (child, (vals, res)) in [(0usize, (y_plus, &mut out.0)), (1, (y_minus, &mut out.1))] {
            let a = self.matrix(child);
            let c = self.fine_to_coarse(child);
            for j in 0..n {
                if c[j].is_none() {
                    let interp: f64 = (0..n).map(|i| y[i] * a[i][j]).sum();
                    res[j] = vals[j] - interp;
                }
            }
        }
        Ok(out)
    }

    /// Squared L2 norm of the coarsening error on one child of area `area`:
    /// r^T M_local r with M_local = area * ref_mass.
    pub fn residual_l2_sq(&self, residual: &[f64], area: f64) -> f64 {
        let n = residual.len();
        let mut acc = 0.0;
        for i in 0..n {
            if residual[i] == 0.0 {
                continue;
            }
            for j in 0..n {
                acc += residual[i] * residual[j] * self.ref_mass[i][j];
            }
        }
        acc * area
    }
}

/// Predicted squared coarsening loss per patch, plus the per-element values
/// kept for the run log.
#[derive(Debug, Clone)]
pub struct PreindicatorResult {
    pub patches: Vec<(CoarsenPatch, f64)>,
    pub per_element: Vec<(ElemId, f64)>,
}

/// For each coarsenable patch of the current mesh, the exact squared L2 norm
/// of U - (interpolation of U after coarsening this patch).
pub fn coarsening_preindicator(
    u: &FeFunction,
    mesh: &Mesh,
) -> Result<PreindicatorResult, PredictError> {
    let cof = CoarseOnFine::get(u.space.degree);
    let mut patches = Vec::new();
    let mut per_element = Vec::new();
    for patch in mesh.coarsenable_patches() {
        let mut gamma_patch = 0.0;
        for pair in &patch.pairs {
            let [c0, c1] = pair.children;
            let p0 = u
                .space
                .leaf_position(c0)
                .ok_or(PredictError::MissingElement(c0))?;
            let p1 = u
                .space
                .leaf_position(c1)
                .ok_or(PredictError::MissingElement(c1))?;
            let y_plus = u.local_values(p0);
            let y_minus = u.local_values(p1);
            let (r_plus, r_minus) = cof.coarsening_error_local(&y_plus, &y_minus)?;
            let g_plus = cof.residual_l2_sq(&r_plus, u.space.leaf_area(p0));
            let g_minus = cof.residual_l2_sq(&r_minus, u.space.leaf_area(p1));
            per_element.push((c0, g_plus));
            per_element.push((c1, g_minus));
            gamma_patch += g_plus + g_minus;
        }
        patches.push((patch, gamma_patch));
    }
    Ok(PreindicatorResult { patches, per_element })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fespace::quadrature::QuadratureRule;
    use crate::fespace::{transfer, FeSpace};
    use crate::mesh::Domain;

    /// Hand-derived P1 reference tables (omitted zeros written out).
    pub const A_PLUS_P1: [[f64; 3]; 3] = [
        [0.0, 1.0, 0.5],
        [0.0, 0.0, 0.5],
        [1.0, 0.0, 0.0],
    ];
    pub const A_MINUS_P1: [[f64; 3]; 3] = [
        [0.0, 0.0, 0.5],
        [1.0, 0.0, 0.5],
        [0.0, 1.0, 0.0],
    ];

    #[test]
    fn p1_matrices_match_reference_tables() {
        let cof = CoarseOnFine::build(1).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((cof.a_plus[i][j] - A_PLUS_P1[i][j]).abs() < 1e-14);
                assert!((cof.a_minus[i][j] - A_MINUS_P1[i][j]).abs() < 1e-14);
            }
        }
        // fine-to-coarse maps: c+ = (2, 0, -), c- = (1, 2, -)
        assert_eq!(cof.c_plus, vec![Some(2), Some(0), None]);
        assert_eq!(cof.c_minus, vec![Some(1), Some(2), None]);
        // coarse-to-fine maps: d+ = (1, -, 0), d- = (-, 0, 1)
        assert_eq!(cof.d_plus, vec![Some(1), None, Some(0)]);
        assert_eq!(cof.d_minus, vec![None, Some(0), Some(1)]);
    }

    #[test]
    fn p2_maps_match_reference_tables() {
        let cof = CoarseOnFine::build(2).unwrap();
        // D+ = D- = {0,1,2,5}; c+ = (2,0,5,-,-,4), c- = (1,2,5,-,-,3)
        assert_eq!(
            cof.c_plus,
            vec![Some(2), Some(0), Some(5), None, None, Some(4)]
        );
        assert_eq!(
            cof.c_minus,
            vec![Some(1), Some(2), Some(5), None, None, Some(3)]
        );
        // C+ = {0,2,4,5}, C- = {1,2,3,5}
        let c_plus_set: Vec<usize> = cof.c_plus.iter().flatten().copied().collect();
        let mut sorted = c_plus_set.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 2, 4, 5]);
        let mut c_minus_set: Vec<usize> = cof.c_minus.iter().flatten().copied().collect();
        c_minus_set.sort_unstable();
        assert_eq!(c_minus_set, vec![1, 2, 3, 5]);
    }

    #[test]
    fn p2_matrices_match_reference_tables() {
        let cof = CoarseOnFine::build(2).unwrap();
        let a_plus = [
            [0.0, 1.0, 0.0, 3.0 / 8.0, -1.0 / 8.0, 0.0],
            [0.0, 0.0, 0.0, -1.0 / 8.0, -1.0 / 8.0, 0.0],
            [1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 0.0, 0.5, 0.0],
            [0.0, 0.0, 0.0, 0.0, 0.5, 1.0],
            [0.0, 0.0, 1.0, 3.0 / 4.0, 1.0 / 4.0, 0.0],
        ];
        let a_minus = [
            [0.0, 0.0, 0.0, -1.0 / 8.0, -1.0 / 8.0, 0.0],
            [1.0, 0.0, 0.0, -1.0 / 8.0, 3.0 / 8.0, 0.0],
            [0.0, 1.0, 0.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 0.5, 0.0, 1.0],
            [0.0, 0.0, 0.0, 0.5, 0.0, 0.0],
            [0.0, 0.0, 1.0, 1.0 / 4.0, 3.0 / 4.0, 0.0],
        ];
        for i in 0..6 {
            for j in 0..6 {
                assert!(
                    (cof.a_plus[i][j] - a_plus[i][j]).abs() < 1e-14,
                    "A+[{i}][{j}] = {} vs {}",
                    cof.a_plus[i][j],
                    a_plus[i][j]
                );
                assert!(
                    (cof.a_minus[i][j] - a_minus[i][j]).abs() < 1e-14,
                    "A-[{i}][{j}] = {} vs {}",
                    cof.a_minus[i][j],
                    a_minus[i][j]
                );
            }
        }
    }

    #[test]
    fn redundant_columns_are_unit_vectors() {
        // surviving child DOF j gives column j of A = e_{c(j)}, for all degrees
        for p in 1..=4 {
            let cof = CoarseOnFine::build(p).unwrap();
            let n = local_dof_count(p);
            for child in 0..2 {
                let a = cof.matrix(child);
                let c = cof.fine_to_coarse(child);
                for j in 0..n {
                    if let Some(ci) = c[j] {
                        for i in 0..n {
                            let expect = if i == ci { 1.0 } else { 0.0 };
                            assert!(
                                (a[i][j] - expect).abs() < 1e-12,
                                "p={p} child={child} A[{i}][{j}]"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn coarse_basis_restriction_identity() {
        // parent basis restricted to child equals A * child basis, checked at
        // quadrature points for every degree
        for p in 1..=4 {
            let cof = CoarseOnFine::build(p).unwrap();
            let basis = ReferenceBasis::get(p);
            let n = local_dof_count(p);
            let rule = QuadratureRule::with_exactness(2 * p);
            for child in 0..2 {
                let a = cof.matrix(child);
                for pt in &rule.points {
                    // the point within the child, mapped to parent coordinates
                    let mut parent = [0.0; 3];
                    for k in 0..3 {
                        for axis in 0..3 {
                            parent[axis] += pt[k] * CHILD_VERTS[child][k][axis];
                        }
                    }
                    let coarse_vals = basis.eval(parent);
                    let fine_vals = basis.eval(*pt);
                    for i in 0..n {
                        let via_matrix: f64 =
                            (0..n).map(|j| a[i][j] * fine_vals[j]).sum();
                        assert!(
                            (coarse_vals[i] - via_matrix).abs() < 1e-12,
                            "p={p} child={child} basis {i}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn assemble_y_follows_reference_pattern() {
        // p=2: y = (y1+, y0-, y0+, y5-, y5+, y2+)
        let cof = CoarseOnFine::build(2).unwrap();
        // consistency: shared DOF pairs are (y0+, y1-) and (y2+, y2-)
        let y_plus = [10.0, 20.0, 30.0, -1.0, -2.0, 60.0];
        let y_minus = [70.0, 10.0, 30.0, -3.0, -4.0, 110.0];
        let y = cof.assemble_y(&y_plus, &y_minus).unwrap();
        assert_eq!(y, vec![20.0, 70.0, 10.0, 110.0, 60.0, 30.0]);
    }

    #[test]
    fn assemble_y_rejects_inconsistent_shared_dof() {
        let cof = CoarseOnFine::build(2).unwrap();
        let y_plus = [10.0, 20.0, 30.0, -1.0, -2.0, 60.0];
        let y_minus = [70.0, 10.0 + 1e-6, 30.0, -3.0, -4.0, 110.0];
        assert!(matches!(
            cof.assemble_y(&y_plus, &y_minus),
            Err(PredictError::SharedDofMismatch { .. })
        ));
    }

    #[test]
    fn assemble_y_p1_by_hand() {
        // p=1: c+ = (2,0,-), c- = (1,2,-): y = (y1+, y0-, y0+) with y1- = y0+
        let cof = CoarseOnFine::build(1).unwrap();
        let y_plus = [5.0, 7.0, 9.0];
        let y_minus = [11.0, 5.0, 13.0];
        let y = cof.assemble_y(&y_plus, &y_minus).unwrap();
        assert_eq!(y, vec![7.0, 11.0, 5.0]);
    }

    #[test]
    fn polynomial_coarsening_error_vanishes() {
        for p in 1..=4usize {
            let cof = CoarseOnFine::build(p).unwrap();
            let basis = ReferenceBasis::get(p);
            let n = local_dof_count(p);
            // a global polynomial of degree p across the pair: values follow
            // from evaluating it at the physical node positions of each child
            let poly = |l: [f64; 3]| (1.0 + l[1]).powi(p as i32) + 0.5 * l[2];
            let mut y = [vec![0.0; n], vec![0.0; n]];
            for child in 0..2 {
                for (j, node) in basis.nodes.iter().enumerate() {
                    let mut parent = [0.0; 3];
                    for k in 0..3 {
                        for axis in 0..3 {
                            parent[axis] += node[k] * CHILD_VERTS[child][k][axis];
                        }
                    }
                    y[child][j] = poly(parent);
                }
            }
            let (r_plus, r_minus) = cof.coarsening_error_local(&y[0], &y[1]).unwrap();
            for r in r_plus.iter().chain(&r_minus) {
                assert!(r.abs() < 1e-12, "p={p}: residual {r}");
            }
        }
    }

    #[test]
    fn p2_worked_residual_formulas() {
        // the four hand-expanded residual expressions, probed with random values
        let cof = CoarseOnFine::build(2).unwrap();
        let mut state = 42u64;
        let mut rnd = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        };
        for _ in 0..100 {
            let mut y_plus = [0.0; 6];
            let mut y_minus = [0.0; 6];
            for v in y_plus.iter_mut() {
                *v = rnd();
            }
            for v in y_minus.iter_mut() {
                *v = rnd();
            }
            // shared DOF: y0+ = y1-, y2+ = y2-
            y_minus[1] = y_plus[0];
            y_minus[2] = y_plus[2];
            let (r_plus, r_minus) = cof.coarsening_error_local(&y_plus, &y_minus).unwrap();
            let r3p = y_plus[3] - (3.0 / 8.0) * y_plus[1] + (1.0 / 8.0) * y_minus[0]
                - (3.0 / 4.0) * y_plus[2];
            let r4p = y_plus[4] + (1.0 / 8.0) * y_plus[1] + (1.0 / 8.0) * y_minus[0]
                - (1.0 / 4.0) * y_plus[2]
                - 0.5 * y_plus[5]
                - 0.5 * y_minus[5];
            let r3m = y_minus[3] + (1.0 / 8.0) * y_plus[1] + (1.0 / 8.0) * y_minus[0]
                - 0.5 * y_minus[5]
                - 0.5 * y_plus[5]
                - (1.0 / 4.0) * y_plus[2];
            let r4m = y_minus[4] + (1.0 / 8.0) * y_plus[1] - (3.0 / 8.0) * y_minus[0]
                - (3.0 / 4.0) * y_plus[2];
            assert!((r_plus[3] - r3p).abs() < 1e-12);
            assert!((r_plus[4] - r4p).abs() < 1e-12);
            assert!((r_minus[3] - r3m).abs() < 1e-12);
            assert!((r_minus[4] - r4m).abs() < 1e-12);
        }
    }

    #[test]
    fn preindicator_zero_for_linear_function() {
        let mut mesh = Mesh::macro_mesh(Domain::SquareScaled);
        mesh.refine_all().unwrap();
        mesh.refine_all().unwrap();
        let space = FeSpace::build(&mesh, 1).unwrap();
        let u = space.interpolate(|x| 3.0 * x[0] - x[1] + 2.0, false).unwrap();
        let result = coarsening_preindicator(&u, &mesh).unwrap();
        assert!(!result.patches.is_empty());
        for (_, g) in &result.patches {
            assert!(g.abs() < 1e-24);
        }
    }

    #[test]
    fn preindicator_scales_quadratically() {
        let mut mesh = Mesh::macro_mesh(Domain::SquareScaled);
        mesh.refine_all().unwrap();
        mesh.refine_all().unwrap();
        let space = FeSpace::build(&mesh, 1).unwrap();
        let u = space.interpolate(|x| (x[0] * x[1]).cos(), false).unwrap();
        let u2 = u.scaled(3.0);
        let r1 = coarsening_preindicator(&u, &mesh).unwrap();
        let r2 = coarsening_preindicator(&u2, &mesh).unwrap();
        for ((_, a), (_, b)) in r1.patches.iter().zip(&r2.patches) {
            assert!((b - 9.0 * a).abs() < 1e-10 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn preindicator_total_matches_mutate_and_measure() {
        let mut mesh = Mesh::macro_mesh(Domain::SquareScaled);
        mesh.refine_all().unwrap();
        mesh.refine_all().unwrap();
        for p in [1usize, 2] {
            let space = FeSpace::build(&mesh, p).unwrap();
            let u = space
                .interpolate(|x| (2.0 * x[0]).sin() * (1.5 * x[1] + 0.2).cos(), false)
                .unwrap();
            let predicted: f64 = coarsening_preindicator(&u, &mesh)
                .unwrap()
                .patches
                .iter()
                .map(|(_, g)| g)
                .sum();

            // oracle: actually coarsen a copy, interpolate, integrate
            let mut copy = mesh.clone();
            let patches = copy.coarsenable_patches();
            copy.coarsen(&patches);
            let coarse = FeSpace::build(&copy, p).unwrap();
            let v = transfer(&copy, &u, &coarse).unwrap();
            let rule = QuadratureRule::overkill();
            let mut measured = 0.0;
            for (pos, &e) in space.leaves.iter().enumerate() {
                let a = copy
                    .ancestor_in(e, coarse.leaf_set())
                    .expect("fine leaf under coarse front");
                let apos = coarse.leaf_position(a).unwrap();
                let c = space.leaf_coords(pos);
                let area = space.leaf_area(pos);
                for (pt, w) in rule.points.iter().zip(&rule.weights) {
                    let x = [
                        pt[0] * c[0][0] + pt[1] * c[1][0] + pt[2] * c[2][0],
                        pt[0] * c[0][1] + pt[1] * c[1][1] + pt[2] * c[2][1],
                    ];
                    let uu = u.eval(pos, *pt).unwrap();
                    let vv = v.eval(apos, coarse.barycentric(apos, x)).unwrap();
                    measured += w * area * (uu - vv) * (uu - vv);
                }
            }
            let rel = (predicted - measured).abs() / measured.max(1e-300);
            assert!(rel < 1e-10, "p={p}: predicted {predicted} vs measured {measured}");
        }
    }
}
