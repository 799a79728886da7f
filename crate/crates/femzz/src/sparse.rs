//! Compressed-row symmetric matrices and a preconditioned conjugate gradient solver.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("cg: max_iter={max_iter} exceeded, achieved relative residual {residual:.3e}")]
    MaxIterations {
        max_iter: usize,
        residual: f64,
        /// Best iterate reached before giving up.
        partial: Vec<f64>,
    },
    #[error("cg: non-finite value encountered at iteration {0}")]
    NonFinite(usize),
    #[error("dimension mismatch: matrix is {n}x{n}, vector has length {len}")]
    Dimension { n: usize, len: usize },
}

/// Structurally symmetric sparse matrix in compressed-row storage.
/// Both triangles are stored so that mat-vec is a plain row sweep.
#[derive(Debug, Clone)]
pub struct SparseSym {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseSym {
    /// Assemble from (row, col, value) triplets; duplicates are summed.
    /// The stable sort keeps summation order deterministic.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut order: Vec<usize> = (0..triplets.len()).collect();
        order.sort_by_key(|&k| (triplets[k].0, triplets[k].1));

        let mut row_ptr = vec![0usize; n + 1];
        let mut cols = Vec::with_capacity(triplets.len());
        let mut vals = Vec::with_capacity(triplets.len());
        let mut cur_row = 0usize;
        for &k in &order {
            let (i, j, v) = triplets[k];
            while cur_row < i {
                cur_row += 1;
                row_ptr[cur_row] = cols.len();
            }
            if let (Some(&lc), Some(lv)) = (cols.last(), vals.last_mut()) {
                if lc == j && row_ptr[cur_row] < cols.len() {
                    *lv += v;
                    continue;
                }
            }
            cols.push(j);
            vals.push(v);
        }
        while cur_row < n {
            cur_row += 1;
            row_ptr[cur_row] = cols.len();
        }
        SparseSym { n, row_ptr, cols, vals }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n);
        debug_assert_eq!(y.len(), self.n);
        for i in 0..self.n {
            let mut acc = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.vals[k] * x[self.cols[k]];
            }
            y[i] = acc;
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.matvec(x, &mut y);
        y
    }

    /// x^T A x, used for energy norms.
    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.n {
            let mut row = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                row += self.vals[k] * x[self.cols[k]];
            }
            acc += x[i] * row;
        }
        acc
    }

    pub fn diagonal(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n];
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                if self.cols[k] == i {
                    d[i] = self.vals[k];
                }
            }
        }
        d
    }

    /// a*self + b*other for matrices with identical sparsity patterns.
    pub fn linear_combination(&self, a: f64, other: &SparseSym, b: f64) -> SparseSym {
        assert_eq!(self.n, other.n);
        assert_eq!(self.row_ptr, other.row_ptr, "sparsity patterns differ");
        assert_eq!(self.cols, other.cols, "sparsity patterns differ");
        let vals = self
            .vals
            .iter()
            .zip(&other.vals)
            .map(|(&x, &y)| a * x + b * y)
            .collect();
        SparseSym { n: self.n, row_ptr: self.row_ptr.clone(), cols: self.cols.clone(), vals }
    }

    /// Homogeneous Dirichlet elimination: zero constrained rows and columns,
    /// set unit diagonal.
    pub fn eliminate_dirichlet(&mut self, constrained: &[bool]) {
        assert_eq!(constrained.len(), self.n);
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                let j = self.cols[k];
                if constrained[i] || constrained[j] {
                    self.vals[k] = if i == j { 1.0 } else { 0.0 };
                }
            }
        }
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (self.row_ptr[i]..self.row_ptr[i + 1]).map(move |k| (self.cols[k], self.vals[k]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preconditioner {
    None,
    Diagonal,
}

#[derive(Debug, Clone)]
pub struct CgReport {
    pub iterations: usize,
    pub relative_residual: f64,
}

pub const CG_DEFAULT_REL_TOL: f64 = 1e-10;

/// Preconditioned conjugate gradients for SPD systems.
/// Terminates when ||b - Ax||_2 <= rel_tol * ||b||_2.
pub fn cg_solve(
    a: &SparseSym,
    b: &[f64],
    x0: Option<&[f64]>,
    rel_tol: f64,
    max_iter: usize,
    precond: Preconditioner,
) -> Result<(Vec<f64>, CgReport), SolveError> {
    let n = a.dim();
    if b.len() != n {
        return Err(SolveError::Dimension { n, len: b.len() });
    }
    let b_norm = norm2(b);
    if b_norm == 0.0 {
        return Ok((vec![0.0; n], CgReport { iterations: 0, relative_residual: 0.0 }));
    }
    let inv_diag: Option<Vec<f64>> = match precond {
        Preconditioner::None => None,
        Preconditioner::Diagonal => Some(
            a.diagonal()
                .iter()
                .map(|&d| if d != 0.0 { 1.0 / d } else { 1.0 })
                .collect(),
        ),
    };

    let mut x = match x0 {
        Some(x0) => {
            debug_assert_eq!(x0.len(), n);
            x0.to_vec()
        }
        None => vec![0.0; n],
    };
    let mut r = vec![0.0; n];
    a.matvec(&x, &mut r);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    let mut z = apply_precond(&inv_diag, &r);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut r_norm = norm2(&r);
    let mut ap = vec![0.0; n];

    let mut iter = 0;
    while r_norm > rel_tol * b_norm {
        if iter >= max_iter {
            return Err(SolveError::MaxIterations {
                max_iter,
                residual: r_norm / b_norm,
                partial: x,
            });
        }
        a.matvec(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !pap.is_finite() || pap == 0.0 {
            return Err(SolveError::NonFinite(iter));
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        z = apply_precond(&inv_diag, &r);
        let rz_new = dot(&r, &z);
        if !rz_new.is_finite() {
            return Err(SolveError::NonFinite(iter));
        }
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
        r_norm = norm2(&r);
        iter += 1;
    }
    Ok((x, CgReport { iterations: iter, relative_residual: r_norm / b_norm }))
}

fn apply_precond(inv_diag: &Option<Vec<f64>>, r: &[f64]) -> Vec<f64> {
    match inv_diag {
        Some(d) => r.iter().zip(d).map(|(&ri, &di)| ri * di).collect(),
        None => r.to_vec(),
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
