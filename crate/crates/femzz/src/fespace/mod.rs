//! Lagrange P^p finite element spaces over a leaf section of the mesh tree:
//! DOF management, assembly, interpolation, norms, and inter-mesh transfer.

pub mod basis;
pub mod quadrature;

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::sync::{Arc, OnceLock};

use rayon::prelude::*;
use thiserror::Error;

use crate::mesh::{triangle_area, ElemId, Mesh};
use crate::sparse::SparseSym;
use basis::{local_dof_count, NodeClass, ReferenceBasis, TabulatedBasis, MAX_DEGREE};
use quadrature::QuadratureRule;

#[derive(Debug, Error)]
pub enum FeError {
    #[error("unsupported polynomial degree {0} (supported: 1..=4)")]
    UnsupportedDegree(usize),
    #[error("degree mismatch: source has p={0}, target has p={1}")]
    DegreeMismatch(usize, usize),
    #[error("non-finite value while interpolating at ({0}, {1})")]
    NonFinite(f64, f64),
    #[error("coefficient vector has length {0}, space has dimension {1}")]
    CoeffLength(usize, usize),
    #[error("point lies outside the element")]
    OutsideElement,
    #[error("snapshot parse error: {0}")]
    Snapshot(String),
    #[error("transfer failed: {0}")]
    Transfer(String),
}

/// Identity of a global degree of freedom, used to glue shared DOF across
/// elements without floating-point comparisons.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum DofKey {
    Vertex(usize),
    /// Edge endpoints sorted ascending, step counted from the smaller vertex id.
    Edge(usize, usize, usize),
    Interior(ElemId, usize),
}

/// Immutable Lagrange space over a fixed leaf section.
#[derive(Debug)]
pub struct FeSpace {
    pub degree: usize,
    pub leaves: Vec<ElemId>,
    leaf_set: HashSet<ElemId>,
    leaf_pos: HashMap<ElemId, usize>,
    /// Vertex coordinates per leaf, snapshotted at build time.
    coords: Vec<[[f64; 2]; 3]>,
    areas: Vec<f64>,
    /// local-to-global map g_K per leaf.
    l2g: Vec<Vec<usize>>,
    pub dof_coords: Vec<[f64; 2]>,
    pub is_boundary: Vec<bool>,
    pub dim: usize,
    basis: Arc<ReferenceBasis>,
    mass: OnceLock<Arc<SparseSym>>,
    stiffness: OnceLock<Arc<SparseSym>>,
}

impl FeSpace {
    /// Space over the current leaf section of the mesh.
    pub fn build(mesh: &Mesh, degree: usize) -> Result<Arc<FeSpace>, FeError> {
        Self::on_section(mesh, mesh.leaves(), degree)
    }

    /// Space over an explicit leaf section (e.g. a common refinement).
    pub fn on_section(
        mesh: &Mesh,
        leaves: Vec<ElemId>,
        degree: usize,
    ) -> Result<Arc<FeSpace>, FeError> {
        if !(1..=MAX_DEGREE).contains(&degree) {
            return Err(FeError::UnsupportedDegree(degree));
        }
        let basis = ReferenceBasis::get(degree);
        let p = degree;
        let nloc = local_dof_count(p);
        let mut dof_map: HashMap<DofKey, usize> = HashMap::new();
        let mut dof_coords: Vec<[f64; 2]> = Vec::new();
        let mut is_boundary: Vec<bool> = Vec::new();
        let mut l2g = Vec::with_capacity(leaves.len());
        let mut coords = Vec::with_capacity(leaves.len());
        let mut areas = Vec::with_capacity(leaves.len());

        for &e in &leaves {
            let el = mesh.element(e);
            let c = mesh.element_coords(e);
            let mut local = Vec::with_capacity(nloc);
            for (j, class) in basis.classes.iter().enumerate() {
                let (key, coord) = match *class {
                    NodeClass::Vertex(v) => {
                        (DofKey::Vertex(el.vertices[v]), c[v])
                    }
                    NodeClass::Edge { edge, step } => {
                        let a = el.vertices[(edge + 1) % 3];
                        let b = el.vertices[(edge + 2) % 3];
                        let (lo, hi, k) = if a < b { (a, b, step) } else { (b, a, p - step) };
                        let pa = mesh.vertex(lo);
                        let pb = mesh.vertex(hi);
                        let t = k as f64 / p as f64;
                        (
                            DofKey::Edge(lo, hi, k),
                            [pa[0] + t * (pb[0] - pa[0]), pa[1] + t * (pb[1] - pa[1])],
                        )
                    }
                    NodeClass::Interior(m) => {
                        let l = basis.nodes[j];
                        (
                            DofKey::Interior(e, m),
                            [
                                l[0] * c[0][0] + l[1] * c[1][0] + l[2] * c[2][0],
                                l[0] * c[0][1] + l[1] * c[1][1] + l[2] * c[2][1],
                            ],
                        )
                    }
                };
                let g = *dof_map.entry(key).or_insert_with(|| {
                    dof_coords.push(coord);
                    is_boundary.push(false);
                    dof_coords.len() - 1
                });
                local.push(g);
            }
            // mark DOF on boundary edges
            for edge in 0..3 {
                if el.boundary[edge] {
                    for (j, class) in basis.classes.iter().enumerate() {
                        let on_edge = match *class {
                            NodeClass::Vertex(v) => v == (edge + 1) % 3 || v == (edge + 2) % 3,
                            NodeClass::Edge { edge: ne, .. } => ne == edge,
                            NodeClass::Interior(_) => false,
                        };
                        if on_edge {
                            is_boundary[local[j]] = true;
                        }
                    }
                }
            }
            l2g.push(local);
            coords.push(c);
            areas.push(triangle_area(&c));
        }
        let dim = dof_coords.len();
        let leaf_set: HashSet<ElemId> = leaves.iter().copied().collect();
        let leaf_pos: HashMap<ElemId, usize> =
            leaves.iter().enumerate().map(|(i, &e)| (e, i)).collect();
        Ok(Arc::new(FeSpace {
            degree,
            leaves,
            leaf_set,
            leaf_pos,
            coords,
            areas,
            l2g,
            dof_coords,
            is_boundary,
            dim,
            basis,
            mass: OnceLock::new(),
            stiffness: OnceLock::new(),
        }))
    }

    pub fn leaf_set(&self) -> &HashSet<ElemId> {
        &self.leaf_set
    }

    pub fn leaf_position(&self, e: ElemId) -> Option<usize> {
        self.leaf_pos.get(&e).copied()
    }

    pub fn local_to_global(&self, leaf_pos: usize) -> &[usize] {
        &self.l2g[leaf_pos]
    }

    pub fn leaf_coords(&self, leaf_pos: usize) -> &[[f64; 2]; 3] {
        &self.coords[leaf_pos]
    }

    pub fn leaf_area(&self, leaf_pos: usize) -> f64 {
        self.areas[leaf_pos]
    }

    pub fn reference_basis(&self) -> &ReferenceBasis {
        &self.basis
    }

    pub fn num_free_dofs(&self) -> usize {
        self.is_boundary.iter().filter(|&&b| !b).count()
    }

    /// Columns of J^{-T}: physical gradient = col0 * d/dr + col1 * d/ds.
    pub(crate) fn grad_map(&self, leaf_pos: usize) -> [[f64; 2]; 2] {
        let c = &self.coords[leaf_pos];
        let j11 = c[1][0] - c[0][0];
        let j21 = c[1][1] - c[0][1];
        let j12 = c[2][0] - c[0][0];
        let j22 = c[2][1] - c[0][1];
        let det = j11 * j22 - j12 * j21;
        [
            [j22 / det, -j12 / det],
            [-j21 / det, j11 / det],
        ]
    }

    /// M_ij = integral Phi_i Phi_j, assembled with a rule exact for degree 2p.
    pub fn mass(&self) -> Arc<SparseSym> {
        self.mass
            .get_or_init(|| {
                let tab = TabulatedBasis::get(self.degree, 2 * self.degree);
                Arc::new(self.assemble(&tab, false))
            })
            .clone()
    }

    /// S_ij = integral grad Phi_i . grad Phi_j, rule exact for degree 2p-2.
    pub fn stiffness(&self) -> Arc<SparseSym> {
        self.stiffness
            .get_or_init(|| {
                let tab = TabulatedBasis::get(self.degree, 2 * self.degree.saturating_sub(1));
                Arc::new(self.assemble(&tab, true))
            })
            .clone()
    }

    fn assemble(&self, tab: &TabulatedBasis, gradients: bool) -> SparseSym {
        let nloc = local_dof_count(self.degree);
        let locals: Vec<Vec<f64>> = (0..self.leaves.len())
            .into_par_iter()
            .map(|pos| {
                let area = self.areas[pos];
                let gm = self.grad_map(pos);
                let mut local = vec![0.0; nloc * nloc];
                for (q, w) in tab.rule.weights.iter().enumerate() {
                    if gradients {
                        let g: Vec<[f64; 2]> = tab.grad[q]
                            .iter()
                            .map(|d| {
                                [
                                    gm[0][0] * d[0] + gm[1][0] * d[1],
                                    gm[0][1] * d[0] + gm[1][1] * d[1],
                                ]
                            })
                            .collect();
                        for i in 0..nloc {
                            for j in 0..nloc {
                                local[i * nloc + j] +=
                                    w * area * (g[i][0] * g[j][0] + g[i][1] * g[j][1]);
                            }
                        }
                    } else {
                        let v = &tab.val[q];
                        for i in 0..nloc {
                            for j in 0..nloc {
                                local[i * nloc + j] += w * area * v[i] * v[j];
                            }
                        }
                    }
                }
                local
            })
            .collect();
        let mut triplets = Vec::with_capacity(self.leaves.len() * nloc * nloc);
        for (pos, local) in locals.iter().enumerate() {
            let g = &self.l2g[pos];
            for i in 0..nloc {
                for j in 0..nloc {
                    triplets.push((g[i], g[j], local[i * nloc + j]));
                }
            }
        }
        SparseSym::from_triplets(self.dim, &triplets)
    }

    /// b_i = integral f Phi_i by element quadrature.
    pub fn load_vector<F>(&self, f: F, rule: &QuadratureRule) -> Vec<f64>
    where
        F: Fn([f64; 2]) -> f64 + Sync,
    {
        let tab = TabulatedBasis::get(self.degree, rule.exactness);
        let nloc = local_dof_count(self.degree);
        let locals: Vec<Vec<f64>> = (0..self.leaves.len())
            .into_par_iter()
            .map(|pos| {
                let area = self.areas[pos];
                let c = &self.coords[pos];
                let mut local = vec![0.0; nloc];
                for (q, w) in tab.rule.weights.iter().enumerate() {
                    let l = tab.rule.points[q];
                    let x = [
                        l[0] * c[0][0] + l[1] * c[1][0] + l[2] * c[2][0],
                        l[0] * c[0][1] + l[1] * c[1][1] + l[2] * c[2][1],
                    ];
                    let fv = f(x) * w * area;
                    for (i, li) in local.iter_mut().enumerate() {
                        *li += fv * tab.val[q][i];
                    }
                }
                local
            })
            .collect();
        let mut b = vec![0.0; self.dim];
        for (pos, local) in locals.iter().enumerate() {
            for (i, &v) in local.iter().enumerate() {
                b[self.l2g[pos][i]] += v;
            }
        }
        b
    }

    /// Lagrange interpolation: coefficients are the point values of v at the
    /// DOF coordinates; boundary DOF are pinned to zero when requested.
    pub fn interpolate<F>(self: &Arc<Self>, v: F, zero_boundary: bool) -> Result<FeFunction, FeError>
    where
        F: Fn([f64; 2]) -> f64,
    {
        let mut coeffs = Vec::with_capacity(self.dim);
        for (i, &x) in self.dof_coords.iter().enumerate() {
            let val = if zero_boundary && self.is_boundary[i] {
                0.0
            } else {
                let val = v(x);
                if !val.is_finite() {
                    return Err(FeError::NonFinite(x[0], x[1]));
                }
                val
            };
            coeffs.push(val);
        }
        Ok(FeFunction { space: self.clone(), coeffs })
    }

    pub fn zero_function(self: &Arc<Self>) -> FeFunction {
        FeFunction { space: self.clone(), coeffs: vec![0.0; self.dim] }
    }

    pub fn function_from(self: &Arc<Self>, coeffs: Vec<f64>) -> Result<FeFunction, FeError> {
        if coeffs.len() != self.dim {
            return Err(FeError::CoeffLength(coeffs.len(), self.dim));
        }
        Ok(FeFunction { space: self.clone(), coeffs })
    }

    /// Barycentric coordinates of a physical point with respect to a leaf.
    pub fn barycentric(&self, leaf_pos: usize, x: [f64; 2]) -> [f64; 3] {
        let c = &self.coords[leaf_pos];
        let det = (c[1][0] - c[0][0]) * (c[2][1] - c[0][1])
            - (c[2][0] - c[0][0]) * (c[1][1] - c[0][1]);
        let l1 = ((x[0] - c[0][0]) * (c[2][1] - c[0][1]) - (c[2][0] - c[0][0]) * (x[1] - c[0][1]))
            / det;
        let l2 = ((c[1][0] - c[0][0]) * (x[1] - c[0][1]) - (x[0] - c[0][0]) * (c[1][1] - c[0][1]))
            / det;
        [1.0 - l1 - l2, l1, l2]
    }
}

/// Coefficient vector over a space; U = coeffs^T basis.
#[derive(Debug, Clone)]
pub struct FeFunction {
    pub space: Arc<FeSpace>,
    pub coeffs: Vec<f64>,
}

impl FeFunction {
    pub fn local_values(&self, leaf_pos: usize) -> Vec<f64> {
        self.space.l2g[leaf_pos].iter().map(|&g| self.coeffs[g]).collect()
    }

    /// Point evaluation on a leaf at barycentric coordinates.
    pub fn eval(&self, leaf_pos: usize, l: [f64; 3]) -> Result<f64, FeError> {
        if l.iter().any(|&li| li < -1e-10 || li > 1.0 + 1e-10) {
            return Err(FeError::OutsideElement);
        }
        let vals = self.space.basis.eval(l);
        Ok(self
            .local_values(leaf_pos)
            .iter()
            .zip(&vals)
            .map(|(c, v)| c * v)
            .sum())
    }

    /// Physical gradient on a leaf at barycentric coordinates.
    pub fn gradient_at(&self, leaf_pos: usize, l: [f64; 3]) -> Result<[f64; 2], FeError> {
        if l.iter().any(|&li| li < -1e-10 || li > 1.0 + 1e-10) {
            return Err(FeError::OutsideElement);
        }
        let grads = self.space.basis.eval_grad(l);
        let gm = self.space.grad_map(leaf_pos);
        let local = self.local_values(leaf_pos);
        let mut gr = 0.0;
        let mut gs = 0.0;
        for (c, d) in local.iter().zip(&grads) {
            gr += c * d[0];
            gs += c * d[1];
        }
        Ok([gm[0][0] * gr + gm[1][0] * gs, gm[0][1] * gr + gm[1][1] * gs])
    }

    pub fn l2_norm(&self) -> f64 {
        self.space.mass().quadratic_form(&self.coeffs).max(0.0).sqrt()
    }

    pub fn energy_norm(&self) -> f64 {
        self.space.stiffness().quadratic_form(&self.coeffs).max(0.0).sqrt()
    }

    /// Squared L2 norm restricted to one leaf, by local quadrature.
    pub fn element_l2_sq(&self, leaf_pos: usize) -> f64 {
        let tab = TabulatedBasis::get(self.space.degree, 2 * self.space.degree);
        let local = self.local_values(leaf_pos);
        let area = self.space.areas[leaf_pos];
        let mut acc = 0.0;
        for (q, w) in tab.rule.weights.iter().enumerate() {
            let v: f64 = local.iter().zip(&tab.val[q]).map(|(c, b)| c * b).sum();
            acc += w * v * v;
        }
        acc * area
    }

    /// Squared energy norm restricted to one leaf.
    pub fn element_energy_sq(&self, leaf_pos: usize) -> f64 {
        let tab = TabulatedBasis::get(self.space.degree, 2 * (self.space.degree - 1).max(0));
        let local = self.local_values(leaf_pos);
        let area = self.space.areas[leaf_pos];
        let gm = self.space.grad_map(leaf_pos);
        let mut acc = 0.0;
        for (q, w) in tab.rule.weights.iter().enumerate() {
            let mut gr = 0.0;
            let mut gs = 0.0;
            for (c, d) in local.iter().zip(&tab.grad[q]) {
                gr += c * d[0];
                gs += c * d[1];
            }
            let gx = gm[0][0] * gr + gm[1][0] * gs;
            let gy = gm[0][1] * gr + gm[1][1] * gs;
            acc += w * (gx * gx + gy * gy);
        }
        acc * area
    }

    /// ||F - g||_{L2} against a point-evaluable function, by the overkill rule.
    pub fn l2_distance_to<G>(&self, g: G) -> f64
    where
        G: Fn([f64; 2]) -> f64 + Sync,
    {
        let tab = TabulatedBasis::get(self.space.degree, quadrature::OVERKILL_DEGREE);
        let per_leaf: Vec<f64> = (0..self.space.leaves.len())
            .into_par_iter()
            .map(|pos| {
                let area = self.space.areas[pos];
                let c = &self.space.coords[pos];
                let local = self.local_values(pos);
                let mut acc = 0.0;
                for (q, w) in tab.rule.weights.iter().enumerate() {
                    let l = tab.rule.points[q];
                    let x = [
                        l[0] * c[0][0] + l[1] * c[1][0] + l[2] * c[2][0],
                        l[0] * c[0][1] + l[1] * c[1][1] + l[2] * c[2][1],
                    ];
                    let v: f64 = local.iter().zip(&tab.val[q]).map(|(ci, b)| ci * b).sum();
                    let d = v - g(x);
                    acc += w * d * d;
                }
                acc * area
            })
            .collect();
        per_leaf.iter().sum::<f64>().max(0.0).sqrt()
    }

    /// ||grad F - G||_{L2} against a point-evaluable gradient field.
    pub fn energy_distance_to<G>(&self, g: G) -> f64
    where
        G: Fn([f64; 2]) -> [f64; 2] + Sync,
    {
        let tab = TabulatedBasis::get(self.space.degree, quadrature::OVERKILL_DEGREE);
        let per_leaf: Vec<f64> = (0..self.space.leaves.len())
            .into_par_iter()
            .map(|pos| {
                let area = self.space.areas[pos];
                let c = &self.space.coords[pos];
                let gm = self.space.grad_map(pos);
                let local = self.local_values(pos);
                let mut acc = 0.0;
                for (q, w) in tab.rule.weights.iter().enumerate() {
                    let l = tab.rule.points[q];
                    let x = [
                        l[0] * c[0][0] + l[1] * c[1][0] + l[2] * c[2][0],
                        l[0] * c[0][1] + l[1] * c[1][1] + l[2] * c[2][1],
                    ];
                    let mut gr = 0.0;
                    let mut gs = 0.0;
                    for (ci, d) in local.iter().zip(&tab.grad[q]) {
                        gr += ci * d[0];
                        gs += ci * d[1];
                    }
                    let gv = g(x);
                    let dx = gm[0][0] * gr + gm[1][0] * gs - gv[0];
                    let dy = gm[0][1] * gr + gm[1][1] * gs - gv[1];
                    acc += w * (dx * dx + dy * dy);
                }
                acc * area
            })
            .collect();
        per_leaf.iter().sum::<f64>().max(0.0).sqrt()
    }

    pub fn scaled(&self, factor: f64) -> FeFunction {
        FeFunction {
            space: self.space.clone(),
            coeffs: self.coeffs.iter().map(|&c| factor * c).collect(),
        }
    }

    /// self + factor * other (same space).
    pub fn axpy(&self, factor: f64, other: &FeFunction) -> FeFunction {
        debug_assert!(Arc::ptr_eq(&self.space, &other.space));
        FeFunction {
            space: self.space.clone(),
            coeffs: self
                .coeffs
                .iter()
                .zip(&other.coeffs)
                .map(|(&a, &b)| a + factor * b)
                .collect(),
        }
    }

    pub fn zero_boundary(&mut self) {
        for (c, &b) in self.coeffs.iter_mut().zip(&self.space.is_boundary) {
            if b {
                *c = 0.0;
            }
        }
    }

    /// Text snapshot: `femzz-fun v1 <dim>` then one coefficient per line.
    pub fn write_snapshot(&self) -> String {
        let mut out = String::new();
        writeln!(out, "femzz-fun v1 {}", self.coeffs.len()).unwrap();
        for c in &self.coeffs {
            writeln!(out, "{:.16e}", c).unwrap();
        }
        out
    }
}

pub fn parse_function_snapshot(text: &str) -> Result<Vec<f64>, FeError> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| FeError::Snapshot("empty".into()))?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some("femzz-fun") || parts.next() != Some("v1") {
        return Err(FeError::Snapshot("bad header".into()));
    }
    let dim: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| FeError::Snapshot("bad dimension".into()))?;
    let coeffs: Result<Vec<f64>, _> = lines.take(dim).map(|l| l.trim().parse::<f64>()).collect();
    let coeffs = coeffs.map_err(|e| FeError::Snapshot(e.to_string()))?;
    if coeffs.len() != dim {
        return Err(FeError::Snapshot("missing coefficients".into()));
    }
    Ok(coeffs)
}

/// L2 inner product of two functions on the same space: f^T M g.
pub fn l2_inner(f: &FeFunction, g: &FeFunction) -> f64 {
    let m = f.space.mass();
    crate::sparse::dot(&m.apply(&f.coeffs), &g.coeffs)
}

/// Lagrange transfer of `source` onto `target`, both P^p spaces over leaf
/// sections of the same tree. Refined regions prolongate exactly via the
/// coarse-on-fine matrices; coarsened regions drop DOF (pure interpolation).
pub fn transfer(
    mesh: &Mesh,
    source: &FeFunction,
    target: &Arc<FeSpace>,
) -> Result<FeFunction, FeError> {
    let p = source.space.degree;
    if p != target.degree {
        return Err(FeError::DegreeMismatch(p, target.degree));
    }
    let cof = crate::coarsen_predict::CoarseOnFine::get(p);
    let src = &source.space;
    let mut coeffs = vec![0.0; target.dim];
    for (tpos, &t) in target.leaves.iter().enumerate() {
        let local = if let Some(spos) = src.leaf_position(t) {
            source.local_values(spos)
        } else if let Some(a) = mesh.ancestor_in(t, src.leaf_set()) {
            // target is below the source front: walk down with A+-
            let apos = src.leaf_position(a).expect("ancestor is a source leaf");
            let mut vals = source.local_values(apos);
            for child in mesh.path_down(a, t) {
                vals = cof.prolongate(&vals, child);
            }
            vals
        } else {
            // target is above the source front: assemble by dropping DOF
            gather_up(mesh, source, t, &cof)?
        };
        for (j, &g) in target.l2g[tpos].iter().enumerate() {
            coeffs[g] = local[j];
        }
    }
    Ok(FeFunction { space: target.clone(), coeffs })
}

fn gather_up(
    mesh: &Mesh,
    source: &FeFunction,
    e: ElemId,
    cof: &crate::coarsen_predict::CoarseOnFine,
) -> Result<Vec<f64>, FeError> {
    if let Some(spos) = source.space.leaf_position(e) {
        return Ok(source.local_values(spos));
    }
    let [c0, c1] = mesh
        .element(e)
        .children
        .expect("source front lies below this element");
    let y_plus = gather_up(mesh, source, c0, cof)?;
    let y_minus = gather_up(mesh, source, c1, cof)?;
    cof.assemble_y(&y_plus, &y_minus)
        .map_err(|e| FeError::Transfer(e.to_string()))
}
