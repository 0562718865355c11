//! Reference computations used as independent oracles by the integration tests.
#![allow(dead_code)]

use std::f64::consts::PI;

/// Composite Simpson rule on [lo, hi] with `intervals` (even) panels.
pub fn simpson<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, intervals: usize) -> f64 {
    assert!(intervals.is_multiple_of(2));
    let h = (hi - lo) / intervals as f64;
    let mut s = f(lo) + f(hi);
    for i in 1..intervals {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(lo + h * i as f64);
    }
    s * h / 3.0
}

/// Two-dimensional Simpson rule on a square.
pub fn simpson2<F: Fn(f64, f64) -> f64>(f: F, lo: f64, hi: f64, intervals: usize) -> f64 {
    simpson(|a| simpson(|b| f(a, b), lo, hi, intervals), lo, hi, intervals)
}

pub fn phi(u: f64) -> f64 {
    (-0.5 * u * u).exp() / (2.0 * PI).sqrt()
}

/// The one-dimensional factor of the order-2 and order-4 kernels and its derivative,
/// written out by hand: k₂ = φ, k₄ = (3 − u²)φ/2.
pub fn factor(order: u32, u: f64) -> (f64, f64) {
    match order {
        2 => (phi(u), -u * phi(u)),
        4 => (0.5 * (3.0 - u * u) * phi(u), 0.5 * (u.powi(3) - 5.0 * u) * phi(u)),
        _ => panic!("reference factor only for orders 2 and 4"),
    }
}

/// K̇(u) for the product kernel built from [`factor`].
pub fn kernel_grad(order: u32, u: &[f64]) -> Vec<f64> {
    let parts: Vec<(f64, f64)> = u.iter().map(|&t| factor(order, t)).collect();
    (0..u.len())
        .map(|k| {
            parts
                .iter()
                .enumerate()
                .map(|(j, p)| if j == k { p.1 } else { p.0 })
                .product()
        })
        .collect()
}

/// Naive double-loop estimator over ordered pairs: (θ̂, Σ̂, Δ̂) as flat row-major d×d.
pub struct NaiveFit {
    pub theta: Vec<f64>,
    pub sigma: Vec<f64>,
    pub delta: Vec<f64>,
    pub row_means: Vec<Vec<f64>>,
}

#[allow(clippy::needless_range_loop)]
pub fn naive_fit(y: &[f64], x: &[Vec<f64>], order: u32, h: f64) -> NaiveFit {
    let n = y.len();
    let d = x[0].len();
    let u_ij = |i: usize, j: usize| -> Vec<f64> {
        let u: Vec<f64> = (0..d).map(|k| (x[i][k] - x[j][k]) / h).collect();
        kernel_grad(order, &u)
            .into_iter()
            .map(|g| -g * (y[i] - y[j]) / h.powi(d as i32 + 1))
            .collect()
    };
    let mut row_means = vec![vec![0.0; d]; n];
    let mut theta = vec![0.0; d];
    let mut delta = vec![0.0; d * d];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let u = u_ij(i, j);
            for k in 0..d {
                row_means[i][k] += u[k] / (n - 1) as f64;
                theta[k] += u[k] / (n * (n - 1)) as f64;
            }
            for a in 0..d {
                for b in 0..d {
                    delta[a * d + b] += u[a] * u[b] / (n * (n - 1)) as f64;
                }
            }
        }
    }
    let hd2 = h.powi(d as i32 + 2);
    for v in delta.iter_mut() {
        *v *= hd2;
    }
    let mut sigma = vec![0.0; d * d];
    for r in &row_means {
        let l: Vec<f64> = (0..d).map(|k| 2.0 * (r[k] - theta[k])).collect();
        for a in 0..d {
            for b in 0..d {
                sigma[a * d + b] += l[a] * l[b] / n as f64;
            }
        }
    }
    NaiveFit { theta, sigma, delta, row_means }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

/// Largest relative error, measured against the largest reference entry.
pub fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1e-300);
    a.iter().zip(b).fold(0.0_f64, |m, (p, q)| m.max((p - q).abs() / scale))
}

/// Gil-Pelaez inversion of exp(−t²/2)[1 + Σⱼ(ιt)ʲγⱼ]: trapezoid on
/// t ∈ [−40, 40] with 2¹⁴ points. The point count is even, so t = 0 is never
/// a node; the integrand is even, so only t > 0 is stored (weight 2).
pub struct FourierCdf {
    /// (t, e·A/t, e·B/t) with bracket = A + ιB
    nodes: Vec<(f64, f64, f64)>,
    step: f64,
}

impl FourierCdf {
    pub fn new(g: &[f64; 9]) -> Self {
        const POINTS: usize = 1 << 14;
        let step = 80.0 / (POINTS - 1) as f64;
        let nodes = (POINTS / 2..POINTS)
            .map(|k| -40.0 + step * k as f64)
            .filter_map(|t| {
                let e = (-0.5 * t * t).exp();
                if e == 0.0 {
                    return None;
                }
                let (mut a, mut b) = (1.0, 0.0);
                for (j0, gj) in g.iter().enumerate() {
                    let j = j0 + 1;
                    let term = gj * t.powi(j as i32);
                    match j % 4 {
                        0 => a += term,
                        1 => b += term,
                        2 => a -= term,
                        _ => b -= term,
                    }
                }
                Some((t, e * a / t, e * b / t))
            })
            .collect();
        Self { nodes, step }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let sum: f64 = self.nodes.iter().map(|&(t, a, b)| {
            let (s, c) = (t * x).sin_cos();
            c * b - s * a
        }).sum();
        0.5 - 2.0 * self.step * sum / (2.0 * std::f64::consts::PI)
    }
}
