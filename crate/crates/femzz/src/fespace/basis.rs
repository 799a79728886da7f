//! Reference-triangle Lagrange bases for degrees 1..=4.
//!
//! Local node layout: vertex nodes first, then p-1 equispaced nodes per edge
//! (edge e is opposite vertex e, traversed from vertex (e+1)%3 to vertex
//! (e+2)%3), then interior nodes for p >= 3. The coarse-on-fine machinery
//! assumes this exact layout.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use super::quadrature::QuadratureRule;

pub const MAX_DEGREE: usize = 4;

/// Where a local node lives on the reference triangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeClass {
    Vertex(usize),
    /// Edge index and 1-based step along the edge (position k/p from the
    /// first endpoint).
    Edge { edge: usize, step: usize },
    Interior(usize),
}

#[derive(Debug)]
pub struct ReferenceBasis {
    pub degree: usize,
    /// Barycentric coordinates of the local nodes.
    pub nodes: Vec<[f64; 3]>,
    pub classes: Vec<NodeClass>,
    /// Inverse Vandermonde: basis_i(x) = sum_k vinv[k][i] * mono_k(x).
    vinv: Vec<Vec<f64>>,
    /// Monomial exponents (a, b) for r^a s^b, total degree <= p.
    monos: Vec<(usize, usize)>,
}

pub fn local_dof_count(degree: usize) -> usize {
    (degree + 1) * (degree + 2) / 2
}

/// Barycentric coordinates of the local Lagrange nodes.
pub fn local_nodes(degree: usize) -> (Vec<[f64; 3]>, Vec<NodeClass>) {
    let p = degree;
    let mut nodes = Vec::with_capacity(local_dof_count(p));
    let mut classes = Vec::with_capacity(local_dof_count(p));
    for v in 0..3 {
        let mut l = [0.0; 3];
        l[v] = 1.0;
        nodes.push(l);
        classes.push(NodeClass::Vertex(v));
    }
    for edge in 0..3 {
        let a = (edge + 1) % 3;
        let b = (edge + 2) % 3;
        for step in 1..p {
            let t = step as f64 / p as f64;
            let mut l = [0.0; 3];
            l[a] = 1.0 - t;
            l[b] = t;
            nodes.push(l);
            classes.push(NodeClass::Edge { edge, step });
        }
    }
    let mut interior = 0;
    // lexicographic in (i, j) over barycentric multi-indices (i, j, k)/p, all >= 1
    for i in 1..p {
        for j in 1..p {
            let k = p as i64 - i as i64 - j as i64;
            if k >= 1 {
                nodes.push([i as f64 / p as f64, j as f64 / p as f64, k as f64 / p as f64]);
                classes.push(NodeClass::Interior(interior));
                interior += 1;
            }
        }
    }
    (nodes, classes)
}

impl ReferenceBasis {
    pub fn get(degree: usize) -> Arc<ReferenceBasis> {
        static CACHE: OnceLock<Mutex<HashMap<usize, Arc<ReferenceBasis>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        let mut guard = cache.lock().unwrap();
        guard
            .entry(degree)
            .or_insert_with(|| Arc::new(ReferenceBasis::build(degree)))
            .clone()
    }

    fn build(degree: usize) -> ReferenceBasis {
        assert!((1..=MAX_DEGREE).contains(&degree), "unsupported degree {degree}");
        let (nodes, classes) = local_nodes(degree);
        let monos: Vec<(usize, usize)> = (0..=degree)
            .flat_map(|a| (0..=(degree - a)).map(move |b| (a, b)))
            .collect();
        let n = nodes.len();
        assert_eq!(n, monos.len());
        // Vandermonde V[i][k] = mono_k(node_i), invert via Gauss-Jordan
        let mut v = vec![vec![0.0; n]; n];
        for (i, node) in nodes.iter().enumerate() {
            let (r, s) = (node[1], node[2]);
            for (k, &(a, b)) in monos.iter().enumerate() {
                v[i][k] = r.powi(a as i32) * s.powi(b as i32);
            }
        }
        let vinv = invert(&v);
        ReferenceBasis { degree, nodes, classes, vinv, monos }
    }

    /// All basis values at barycentric point l.
    pub fn eval(&self, l: [f64; 3]) -> Vec<f64> {
        let (r, s) = (l[1], l[2]);
        let n = self.nodes.len();
        let mut out = vec![0.0; n];
        for (k, &(a, b)) in self.monos.iter().enumerate() {
            let m = r.powi(a as i32) * s.powi(b as i32);
            for i in 0..n {
                out[i] += self.vinv[k][i] * m;
            }
        }
        out
    }

    /// Basis gradients with respect to the reference coordinates (r, s).
    pub fn eval_grad(&self, l: [f64; 3]) -> Vec<[f64; 2]> {
        let (r, s) = (l[1], l[2]);
        let n = self.nodes.len();
        let mut out = vec![[0.0; 2]; n];
        for (k, &(a, b)) in self.monos.iter().enumerate() {
            let dr = if a == 0 {
                0.0
            } else {
                a as f64 * r.powi(a as i32 - 1) * s.powi(b as i32)
            };
            let ds = if b == 0 {
                0.0
            } else {
                b as f64 * r.powi(a as i32) * s.powi(b as i32 - 1)
            };
            for i in 0..n {
                out[i][0] += self.vinv[k][i] * dr;
                out[i][1] += self.vinv[k][i] * ds;
            }
        }
        out
    }
}

/// Basis values and reference gradients tabulated at the points of a rule.
#[derive(Debug)]
pub struct TabulatedBasis {
    pub rule: Arc<QuadratureRule>,
    /// val[q][i] = basis_i at rule point q.
    pub val: Vec<Vec<f64>>,
    /// grad[q][i] = (d/dr, d/ds) of basis_i at rule point q.
    pub grad: Vec<Vec<[f64; 2]>>,
}

impl TabulatedBasis {
    pub fn get(degree: usize, rule_exactness: usize) -> Arc<TabulatedBasis> {
        static CACHE: OnceLock<Mutex<HashMap<(usize, usize), Arc<TabulatedBasis>>>> =
            OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        let mut guard = cache.lock().unwrap();
        guard
            .entry((degree, rule_exactness))
            .or_insert_with(|| {
                let basis = ReferenceBasis::get(degree);
                let rule = QuadratureRule::with_exactness(rule_exactness);
                let val = rule.points.iter().map(|&p| basis.eval(p)).collect();
                let grad = rule.points.iter().map(|&p| basis.eval_grad(p)).collect();
                Arc::new(TabulatedBasis { rule, val, grad })
            })
            .clone()
    }
}

fn invert(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = m.len();
    let mut a: Vec<Vec<f64>> = m.to_vec();
    let mut inv = vec![vec![0.0; n]; n];
    for (i, row) in inv.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        a.swap(col, pivot);
        inv.swap(col, pivot);
        let d = a[col][col];
        assert!(d.abs() > 1e-14, "singular Vandermonde");
        for k in 0..n {
            a[col][k] /= d;
            inv[col][k] /= d;
        }
        for row in 0..n {
            if row != col {
                let f = a[row][col];
                if f != 0.0 {
                    for k in 0..n {
                        a[row][k] -= f * a[col][k];
                        inv[row][k] -= f * inv[col][k];
                    }
                }
            }
        }
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn node_counts() {
        assert_eq!(local_dof_count(1), 3);
        assert_eq!(local_dof_count(2), 6);
        assert_eq!(local_dof_count(3), 10);
        assert_eq!(local_dof_count(4), 15);
        for p in 1..=4 {
            assert_eq!(local_nodes(p).0.len(), local_dof_count(p));
        }
    }

    #[test]
    fn kronecker_property() {
        for p in 1..=4 {
            let basis = ReferenceBasis::get(p);
            for (i, &node) in basis.nodes.iter().enumerate() {
                let vals = basis.eval(node);
                for (j, &v) in vals.iter().enumerate() {
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert!((v - expect).abs() < 1e-12, "p={p} basis_{j}(node_{i})={v}");
                }
            }
        }
    }

    #[test]
    fn partition_of_unity_and_gradient_sum() {
        for p in 1..=4 {
            let basis = ReferenceBasis::get(p);
            for &pt in &[[0.2, 0.3, 0.5], [0.7, 0.1, 0.2], [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]] {
                let vals = basis.eval(pt);
                let s: f64 = vals.iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
                let grads = basis.eval_grad(pt);
                let gr: f64 = grads.iter().map(|g| g[0]).sum();
                let gs: f64 = grads.iter().map(|g| g[1]).sum();
                assert!(gr.abs() < 1e-11 && gs.abs() < 1e-11);
            }
        }
    }

    #[test]
    fn p2_midpoint_nodes_follow_edge_convention() {
        let (nodes, classes) = local_nodes(2);
        // node 3 = midpoint of edge 0 (between vertices 1 and 2), etc.
        assert_eq!(classes[3], NodeClass::Edge { edge: 0, step: 1 });
        assert_eq!(nodes[3], [0.0, 0.5, 0.5]);
        assert_eq!(nodes[4], [0.5, 0.0, 0.5]);
        assert_eq!(nodes[5], [0.5, 0.5, 0.0]);
    }
}
