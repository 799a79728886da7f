//! Triangle quadrature rules built from collapsed Gauss-Legendre tensor grids.
//!
//! Points are stored in barycentric coordinates on the reference triangle
//! {(r,s) : r,s >= 0, r+s <= 1}; weights are normalised to sum to one so that
//! integral over K = |K| * sum w_q f(x_q).

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

#[derive(Debug, Clone)]
pub struct QuadratureRule {
    /// Barycentric coordinates (l0, l1, l2) of each point.
    pub points: Vec<[f64; 3]>,
    /// Normalised weights, sum = 1.
    pub weights: Vec<f64>,
    /// All polynomials up to this total degree are integrated exactly.
    pub exactness: usize,
}

/// Degree of the "overkill" rule used for error and norm evaluation
/// against exact solutions.
pub const OVERKILL_DEGREE: usize = 17;

impl QuadratureRule {
    /// Rule exact for polynomials of total degree <= `degree`.
    pub fn with_exactness(degree: usize) -> Arc<QuadratureRule> {
        static CACHE: OnceLock<Mutex<HashMap<usize, Arc<QuadratureRule>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        let mut guard = cache.lock().unwrap();
        guard
            .entry(degree)
            .or_insert_with(|| Arc::new(build_duffy_rule(degree)))
            .clone()
    }

    pub fn overkill() -> Arc<QuadratureRule> {
        Self::with_exactness(OVERKILL_DEGREE)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Collapsed tensor rule: the square [0,1]^2 maps to the triangle by
/// (u, v) -> (u(1-v), v) with Jacobian (1-v). A degree-d integrand needs
/// ceil((d+1)/2) points in u and ceil((d+2)/2) in v for the extra factor.
fn build_duffy_rule(degree: usize) -> QuadratureRule {
    let nu = degree / 2 + 1;
    let nv = (degree + 1) / 2 + 1;
    let (xu, wu) = gauss_legendre_unit(nu);
    let (xv, wv) = gauss_legendre_unit(nv);
    let mut points = Vec::with_capacity(nu * nv);
    let mut weights = Vec::with_capacity(nu * nv);
    for (&v, &wv_j) in xv.iter().zip(&wv) {
        for (&u, &wu_i) in xu.iter().zip(&wu) {
            let r = u * (1.0 - v);
            let s = v;
            points.push([1.0 - r - s, r, s]);
            // |T| = 1/2; include the 2(1-v) factor so the weights average to 1
            weights.push(2.0 * wu_i * wv_j * (1.0 - v));
        }
    }
    QuadratureRule { points, weights, exactness: degree }
}

/// Gauss-Legendre nodes and weights on [0,1] by Newton iteration on P_n.
fn gauss_legendre_unit(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        // initial guess on [-1,1]
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre(n, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (_, dp) = legendre(n, x);
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        // map [-1,1] -> [0,1]
        nodes[i] = 0.5 * (1.0 - x);
        weights[i] = 0.5 * w;
    }
    nodes.reverse();
    weights.reverse();
    (nodes, weights)
}

/// Value and derivative of the Legendre polynomial P_n at x.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

/// Exact reference integral of r^a s^b over the unit triangle: a! b! / (a+b+2)!.
pub fn reference_monomial_integral(a: usize, b: usize) -> f64 {
    let mut val = 1.0;
    // a! b! / (a+b+2)! computed as a product to avoid overflow
    for k in 1..=b {
        val *= k as f64 / (a + k) as f64;
    }
    for k in (a + b + 1)..=(a + b + 2) {
        val /= k as f64;
    }
    // remaining a!/(a+b)!-part already folded in; derivation:
    // a!b!/(a+b)! = prod_{k=1..b} k/(a+k), then divide by (a+b+1)(a+b+2)
    val
}
