//! The benchmark problems: each provides the exact solution, its gradient,
//! the manufactured source f = du/dt - laplace(u), and the initial datum.
//! Problems are registered by name and selected at runtime.

use std::f64::consts::PI;
use std::sync::Arc;

use crate::mesh::Domain;

pub trait Problem: Send + Sync {
    fn name(&self) -> &'static str;
    fn domain(&self) -> Domain;
    fn t_end_default(&self) -> f64;
    fn u(&self, x: [f64; 2], t: f64) -> f64;
    fn grad_u(&self, x: [f64; 2], t: f64) -> [f64; 2];
    fn source(&self, x: [f64; 2], t: f64) -> f64;
    fn initial(&self, x: [f64; 2]) -> f64;
    /// Earliest time at which the exact solution is evaluable.
    fn min_eval_time(&self) -> f64 {
        0.0
    }
}

/// Name-keyed constructors for the problem family.
pub struct ProblemRegistry {
    entries: Vec<(&'static str, fn() -> Arc<dyn Problem>)>,
}

impl ProblemRegistry {
    pub fn new() -> Self {
        ProblemRegistry { entries: Vec::new() }
    }

    pub fn with_defaults() -> Self {
        let mut reg = Self::new();
        reg.register("p1", || Arc::new(GaussianSlow));
        reg.register("p2", || Arc::new(GaussianFast));
        reg.register("p3", || Arc::new(CornerSingular));
        reg.register("fourier", || Arc::new(FourierIncompatible::default()));
        reg
    }

    pub fn register(&mut self, name: &'static str, ctor: fn() -> Arc<dyn Problem>) {
        self.entries.push((name, ctor));
    }

    pub fn create(&self, name: &str) -> Option<Arc<dyn Problem>> {
        self.entries
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, ctor)| ctor())
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|(n, _)| *n).collect()
    }
}

impl Default for ProblemRegistry {
    fn default() -> Self {
        Self::with_defaults()
    }
}

/// u = sin(pi t) exp(-10 |x|^2) on the scaled square; slow in time.
pub struct GaussianSlow;

/// u = sin(20 pi t) exp(-10 |x|^2); time-error dominant variant.
pub struct GaussianFast;

fn gaussian_bump(x: [f64; 2]) -> f64 {
    (-10.0 * (x[0] * x[0] + x[1] * x[1])).exp()
}

fn gaussian_u(s: f64, x: [f64; 2]) -> f64 {
    s * gaussian_bump(x)
}

fn gaussian_grad(s: f64, x: [f64; 2]) -> [f64; 2] {
    let g = gaussian_bump(x);
    [-20.0 * x[0] * s * g, -20.0 * x[1] * s * g]
}

/// f = g(x) (s'(t) + s(t) (40 - 400 |x|^2)).
fn gaussian_source(s: f64, s_dot: f64, x: [f64; 2]) -> f64 {
    let r2 = x[0] * x[0] + x[1] * x[1];
    gaussian_bump(x) * (s_dot + s * (40.0 - 400.0 * r2))
}

impl Problem for GaussianSlow {
    fn name(&self) -> &'static str {
        "p1"
    }
    fn domain(&self) -> Domain {
        Domain::SquareScaled
    }
    fn t_end_default(&self) -> f64 {
        1.0
    }
    fn u(&self, x: [f64; 2], t: f64) -> f64 {
        gaussian_u((PI * t).sin(), x)
    }
    fn grad_u(&self, x: [f64; 2], t: f64) -> [f64; 2] {
        gaussian_grad((PI * t).sin(), x)
    }
    fn source(&self, x: [f64; 2], t: f64) -> f64 {
        gaussian_source((PI * t).sin(), PI * (PI * t).cos(), x)
    }
    fn initial(&self, _x: [f64; 2]) -> f64 {
        0.0
    }
}

impl Problem for GaussianFast {
    fn name(&self) -> &'static str {
        "p2"
    }
    fn domain(&self) -> Domain {
        Domain::SquareScaled
    }
    fn t_end_default(&self) -> f64 {
        0.1
    }
    fn u(&self, x: [f64; 2], t: f64) -> f64 {
        gaussian_u((20.0 * PI * t).sin(), x)
    }
    fn grad_u(&self, x: [f64; 2], t: f64) -> [f64; 2] {
        gaussian_grad((20.0 * PI * t).sin(), x)
    }
    fn source(&self, x: [f64; 2], t: f64) -> f64 {
        gaussian_source((20.0 * PI * t).sin(), 20.0 * PI * (20.0 * PI * t).cos(), x)
    }
    fn initial(&self, _x: [f64; 2]) -> f64 {
        0.0
    }
}

/// u = t * r^{2/3} sin(2 theta / 3) * exp(-1/(1-r^2)) on the L-shape: a
/// harmonic corner singularity times a mollifier, linear in time. The angle
/// is measured in (0, 3pi/2) with the branch cut along the re-entrant edge.
pub struct CornerSingular;

struct CornerParts {
    sigma: f64,
    grad_sigma: [f64; 2],
    moll: f64,
    moll_d: f64,
    moll_lap: f64,
    r: f64,
}

fn corner_parts(x: [f64; 2]) -> Option<CornerParts> {
    let r2 = x[0] * x[0] + x[1] * x[1];
    if r2 >= 1.0 - 1e-14 {
        return None;
    }
    let r = r2.sqrt();
    let mut theta = x[1].atan2(x[0]);
    if theta < 0.0 {
        theta += 2.0 * PI;
    }
    let sigma = r.powf(2.0 / 3.0) * (2.0 * theta / 3.0).sin();
    let grad_sigma = if r == 0.0 {
        [0.0, 0.0]
    } else {
        let factor = (2.0 / 3.0) * r.powf(-1.0 / 3.0);
        [
            -factor * (theta / 3.0).sin(),
            factor * (theta / 3.0).cos(),
        ]
    };
    let eps = 1.0 - r2;
    let moll = (-1.0 / eps).exp();
    if moll == 0.0 {
        return Some(CornerParts { sigma, grad_sigma, moll: 0.0, moll_d: 0.0, moll_lap: 0.0, r });
    }
    // radial derivatives of exp(-1/(1-r^2))
    let inv = 1.0 / eps;
    let moll_d = -2.0 * r * inv * inv * moll;
    let moll_lap =
        (-4.0 * inv * inv - 8.0 * r2 * inv.powi(3) + 4.0 * r2 * inv.powi(4)) * moll;
    Some(CornerParts { sigma, grad_sigma, moll, moll_d, moll_lap, r })
}

impl Problem for CornerSingular {
    fn name(&self) -> &'static str {
        "p3"
    }
    fn domain(&self) -> Domain {
        Domain::LShape
    }
    fn t_end_default(&self) -> f64 {
        1.0
    }
    fn u(&self, x: [f64; 2], t: f64) -> f64 {
        match corner_parts(x) {
            Some(p) => t * p.sigma * p.moll,
            None => 0.0,
        }
    }
    fn grad_u(&self, x: [f64; 2], t: f64) -> [f64; 2] {
        match corner_parts(x) {
            Some(p) => {
                if p.moll == 0.0 {
                    return [0.0, 0.0];
                }
                let radial = if p.r == 0.0 { [0.0, 0.0] } else { [x[0] / p.r, x[1] / p.r] };
                [
                    t * (p.grad_sigma[0] * p.moll + p.sigma * p.moll_d * radial[0]),
                    t * (p.grad_sigma[1] * p.moll + p.sigma * p.moll_d * radial[1]),
                ]
            }
            None => [0.0, 0.0],
        }
    }
    fn source(&self, x: [f64; 2], t: f64) -> f64 {
        // f = du/dt - laplace(u) = sigma m - t (sigma lap(m) + 2 grad(sigma).grad(m)),
        // using that sigma is harmonic
        match corner_parts(x) {
            Some(p) => {
                if p.moll == 0.0 {
                    return 0.0;
                }
                let mut theta = x[1].atan2(x[0]);
                if theta < 0.0 {
                    theta += 2.0 * PI;
                }
                let cross = if p.r == 0.0 {
                    0.0
                } else {
                    (2.0 / 3.0) * p.r.powf(-1.0 / 3.0) * p.moll_d * (2.0 * theta / 3.0).sin()
                };
                p.sigma * p.moll - t * (p.sigma * p.moll_lap + 2.0 * cross)
            }
            None => 0.0,
        }
    }
    fn initial(&self, _x: [f64; 2]) -> f64 {
        0.0
    }
}

/// Incompatible data on the unit square: f = 0, u0 = 1, solved by the
/// separable Fourier series; the coefficient product collapses to the 1D
/// series g(x,t) g(y,t).
pub struct FourierIncompatible {
    /// Terms with exponential factor below this are dropped.
    pub truncation: f64,
}

impl Default for FourierIncompatible {
    fn default() -> Self {
        FourierIncompatible { truncation: f64::EPSILON }
    }
}

/// Coefficient C_{m,n} of the double sine series for unit initial data.
pub fn fourier_coefficient(m: usize, n: usize) -> f64 {
    let cm = if m % 2 == 0 { 1.0 } else { -1.0 };
    let cn = if n % 2 == 0 { 1.0 } else { -1.0 };
    4.0 / (n as f64 * m as f64 * PI * PI) * (1.0 - cm - cn + cn * cm)
}

impl FourierIncompatible {
    fn max_mode(&self, t: f64) -> usize {
        // largest m with exp(-m^2 pi^2 t) >= truncation
        let bound = (-self.truncation.ln()) / (PI * PI * t);
        (bound.sqrt().ceil() as usize).max(1)
    }

    /// 1D factor g(s, t) = sum_{m odd} (4 / m pi) e^{-m^2 pi^2 t} sin(m pi s).
    fn g(&self, s: f64, t: f64) -> f64 {
        let mmax = self.max_mode(t);
        let mut acc = 0.0;
        let mut m = 1;
        while m <= mmax {
            let mf = m as f64;
            acc += 4.0 / (mf * PI) * (-mf * mf * PI * PI * t).exp() * (mf * PI * s).sin();
            m += 2;
        }
        acc
    }

    fn g_prime(&self, s: f64, t: f64) -> f64 {
        let mmax = self.max_mode(t);
        let mut acc = 0.0;
        let mut m = 1;
        while m <= mmax {
            let mf = m as f64;
            acc += 4.0 * (-mf * mf * PI * PI * t).exp() * (mf * PI * s).cos();
            m += 2;
        }
        acc
    }
}

impl Problem for FourierIncompatible {
    fn name(&self) -> &'static str {
        "fourier"
    }
    fn domain(&self) -> Domain {
        Domain::UnitSquare
    }
    fn t_end_default(&self) -> f64 {
        0.1
    }
    fn u(&self, x: [f64; 2], t: f64) -> f64 {
        assert!(t > 0.0, "Fourier series not evaluable at t = 0");
        self.g(x[0], t) * self.g(x[1], t)
    }
    fn grad_u(&self, x: [f64; 2], t: f64) -> [f64; 2] {
        assert!(t > 0.0, "Fourier series not evaluable at t = 0");
        [
            self.g_prime(x[0], t) * self.g(x[1], t),
            self.g(x[0], t) * self.g_prime(x[1], t),
        ]
    }
    fn source(&self, _x: [f64; 2], _t: f64) -> f64 {
        0.0
    }
    fn initial(&self, _x: [f64; 2]) -> f64 {
        1.0
    }
    fn min_eval_time(&self) -> f64 {
        1e-12
    }
}
