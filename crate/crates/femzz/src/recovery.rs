//! Gradient recovery by area-weighted averaging of the elementwise gradients,
//! and the recovery-based elliptic estimator functional.

use rayon::prelude::*;

use crate::fespace::basis::TabulatedBasis;
use crate::fespace::FeFunction;

/// Both components of the recovered gradient, in the same space as the input.
#[derive(Debug, Clone)]
pub struct RecoveredGradient {
    pub gx: FeFunction,
    pub gy: FeFunction,
}

/// At every DOF point x: G V(x) = sum_{K: x in K} |K| grad V|_K (x) / sum |K|.
/// Interior DOF see a single element, so the average reduces to the local
/// gradient there.
pub fn recover_gradient(v: &FeFunction) -> RecoveredGradient {
    let space = &v.space;
    let basis = space.reference_basis();
    let dim = space.dim;
    let mut weight = vec![0.0; dim];
    let mut gx = vec![0.0; dim];
    let mut gy = vec![0.0; dim];
    // per-leaf nodal gradients, computed in parallel, accumulated in leaf order
    let per_leaf: Vec<Vec<[f64; 2]>> = (0..space.leaves.len())
        .into_par_iter()
        .map(|pos| {
            basis
                .nodes
                .iter()
                .map(|&node| v.gradient_at(pos, node).expect("node lies in the element"))
                .collect()
        })
        .collect();
    for (pos, grads) in per_leaf.iter().enumerate() {
        let area = space.leaf_area(pos);
        for (j, &g) in space.local_to_global(pos).iter().enumerate() {
            weight[g] += area;
            gx[g] += area * grads[j][0];
            gy[g] += area * grads[j][1];
        }
    }
    for i in 0..dim {
        gx[i] /= weight[i];
        gy[i] /= weight[i];
    }
    RecoveredGradient {
        gx: space.function_from(gx).expect("length matches"),
        gy: space.function_from(gy).expect("length matches"),
    }
}

#[derive(Debug, Clone)]
pub struct EllipticEstimate {
    /// ||GV - grad V|| over the whole domain.
    pub global: f64,
    /// Squared contribution per leaf, in leaf order.
    pub per_leaf_sq: Vec<f64>,
}

/// The estimator functional ||GV - grad V|| with its elementwise localisation
/// eps_K^2 = int_K |GV - grad V|^2, by quadrature exact for degree 2p.
pub fn elliptic_estimator(v: &FeFunction) -> EllipticEstimate {
    let recovered = recover_gradient(v);
    elliptic_estimator_with(v, &recovered)
}

pub fn elliptic_estimator_with(v: &FeFunction, g: &RecoveredGradient) -> EllipticEstimate {
    let space = &v.space;
    let tab = TabulatedBasis::get(space.degree, 2 * space.degree);
    let per_leaf_sq: Vec<f64> = (0..space.leaves.len())
        .into_par_iter()
        .map(|pos| {
            let area = space.leaf_area(pos);
            let gm = space.grad_map(pos);
            let lv = v.local_values(pos);
            let lgx = g.gx.local_values(pos);
            let lgy = g.gy.local_values(pos);
            let mut acc = 0.0;
            for (q, w) in tab.rule.weights.iter().enumerate() {
                let mut gr = 0.0;
                let mut gs = 0.0;
                for (c, d) in lv.iter().zip(&tab.grad[q]) {
                    gr += c * d[0];
                    gs += c * d[1];
                }
                let grad = [gm[0][0] * gr + gm[1][0] * gs, gm[0][1] * gr + gm[1][1] * gs];
                let rx: f64 = lgx.iter().zip(&tab.val[q]).map(|(c, b)| c * b).sum();
                let ry: f64 = lgy.iter().zip(&tab.val[q]).map(|(c, b)| c * b).sum();
                let dx = rx - grad[0];
                let dy = ry - grad[1];
                acc += w * (dx * dx + dy * dy);
            }
            acc * area
        })
        .collect();
    let global = per_leaf_sq.iter().sum::<f64>().max(0.0).sqrt();
    EllipticEstimate { global, per_leaf_sq }
}
