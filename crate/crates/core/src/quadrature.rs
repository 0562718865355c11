//! Gauss–Hermite quadrature, tensor products and level-doubling refinement.
//!
//! Rules are stored for the standard normal weight, i.e. `Σ wᵢ f(tᵢ) ≈ ∫ f φ`.
//! Lebesgue integrals of Gaussian-shaped integrands are handled by dividing out
//! φ at a chosen scale, which makes polynomial × Gaussian integrands exact once
//! the rule has enough nodes.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::normal::INV_SQRT_2PI;
use crate::summation::Compensated;

/// Largest rule size we construct; tail weights stay representable below this.
pub const MAX_NODES: usize = 200;

#[derive(Debug, Clone)]
pub struct GaussHermite {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussHermite {
    /// m-point rule for the standard normal weight.
    pub fn new(m: usize) -> Self {
        assert!((1..=MAX_NODES).contains(&m), "rule size {m} out of range");
        // Physicists' rule: Golub–Welsch eigenvalues as starting points, then
        // Newton on the orthonormal Hermite-function recurrence, which also
        // yields the weights to full relative precision in the tails.
        const PIM4: f64 = 0.751_125_544_464_942_5;
        let n = m;
        let jacobi = DMatrix::from_fn(n, n, |i, j| {
            if i + 1 == j || j + 1 == i {
                (0.5 * i.max(j) as f64).sqrt()
            } else {
                0.0
            }
        });
        let mut guesses: Vec<f64> = SymmetricEigen::new(jacobi).eigenvalues.iter().copied().collect();
        guesses.sort_by(|a, b| b.total_cmp(a));
        let mut x = vec![0.0; n];
        let mut w = vec![0.0; n];
        let half = n.div_ceil(2);
        let nf = n as f64;
        for i in 0..half {
            let mut z = guesses[i];
            let mut pp = 0.0;
            for _ in 0..100 {
                let mut p1 = PIM4 * (-0.5 * z * z).exp();
                let mut p2 = 0.0;
                for j in 0..n {
                    let p3 = p2;
                    p2 = p1;
                    let jf = j as f64;
                    p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
                }
                pp = (2.0 * nf).sqrt() * p2;
                let z1 = z;
                z = z1 - p1 / pp;
                if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                    break;
                }
            }
            x[i] = z;
            x[n - 1 - i] = -z;
            w[i] = 2.0 * (-z * z).exp() / (pp * pp);
            w[n - 1 - i] = w[i];
        }
        if n % 2 == 1 {
            x[half - 1] = 0.0;
        }
        let inv_sqrt_pi = 1.0 / std::f64::consts::PI.sqrt();
        let nodes = x.iter().rev().map(|v| v * std::f64::consts::SQRT_2).collect();
        let weights = w.iter().rev().map(|v| v * inv_sqrt_pi).collect();
        Self { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// ∫ f(t) φ(t) dt
    pub fn expect<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&t, &w)| w * f(t))
            .collect::<Compensated>()
            .value()
    }

    /// ∫ f(u) du for an integrand of Gaussian width roughly `scale`.
    pub fn integrate<F: Fn(f64) -> f64>(&self, scale: f64, f: F) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&t, &w)| lebesgue_weight(w, t, scale) * f(scale * t))
            .collect::<Compensated>()
            .value()
    }
}

#[inline]
fn lebesgue_weight(w: f64, t: f64, scale: f64) -> f64 {
    w * scale / (INV_SQRT_2PI * (-0.5 * t * t).exp())
}

/// Reference measure for a tensor-product rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Measure {
    /// Expectation under N(0, I_d).
    Gaussian,
    /// Plain Lebesgue integral over ℝᵈ; `scale` is the integrand's Gaussian width.
    Lebesgue { scale: f64 },
}

/// Tensor-product rule applied to a vector-valued integrand.
///
/// `f(point, out)` must overwrite all `out_len` entries of `out`.
pub fn tensor<F>(rule: &GaussHermite, dim: usize, measure: Measure, out_len: usize, mut f: F) -> Vec<f64>
where
    F: FnMut(&[f64], &mut [f64]),
{
    assert!(dim >= 1);
    let m = rule.len();
    let (scale, lebesgue) = match measure {
        Measure::Gaussian => (1.0, false),
        Measure::Lebesgue { scale } => (scale, true),
    };
    let point_weights: Vec<f64> = rule
        .nodes()
        .iter()
        .zip(rule.weights())
        .map(|(&t, &w)| if lebesgue { lebesgue_weight(w, t, scale) } else { w })
        .collect();
    let points: Vec<f64> = rule.nodes().iter().map(|t| t * scale).collect();

    let mut acc = vec![Compensated::ZERO; out_len];
    let mut buf = vec![0.0; out_len];
    let mut idx = vec![0usize; dim];
    let mut x = vec![points[0]; dim];
    loop {
        let weight: f64 = idx.iter().map(|&k| point_weights[k]).product();
        if weight != 0.0 {
            f(&x, &mut buf);
            for (a, &b) in acc.iter_mut().zip(&buf) {
                a.add(weight * b);
            }
        }
        // odometer increment
        let mut k = 0;
        loop {
            if k == dim {
                return acc.iter().map(Compensated::value).collect();
            }
            idx[k] += 1;
            if idx[k] < m {
                x[k] = points[idx[k]];
                break;
            }
            idx[k] = 0;
            x[k] = points[0];
            k += 1;
        }
    }
}

/// Settings for level-doubling refinement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Refinement {
    pub tol: f64,
    pub start: usize,
    /// Upper bound on the total number of tensor points at the finest level.
    pub max_points: usize,
}

impl Default for Refinement {
    fn default() -> Self {
        Self { tol: 1e-8, start: 16, max_points: 4_000_000 }
    }
}

impl Refinement {
    pub fn with_tol(tol: f64) -> Self {
        Self { tol, ..Self::default() }
    }
}

/// Doubles the rule size until two successive levels agree within
/// `tol · (1 + |I|)` in every component, returning the finer level.
pub fn refine<F>(
    what: &str,
    dim: usize,
    measure: Measure,
    out_len: usize,
    settings: Refinement,
    mut f: F,
) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], &mut [f64]),
{
    let mut m = settings.start.clamp(1, MAX_NODES);
    let mut prev = tensor(&GaussHermite::new(m), dim, measure, out_len, &mut f);
    let mut last_diff = f64::INFINITY;
    loop {
        let next_m = (2 * m).min(MAX_NODES);
        let too_big = (next_m as f64).powi(dim as i32) > settings.max_points as f64;
        if next_m == m || too_big {
            return Err(Error::Quadrature { what: what.to_string(), diff: last_diff, tol: settings.tol });
        }
        m = next_m;
        let cur = tensor(&GaussHermite::new(m), dim, measure, out_len, &mut f);
        let mut ok = true;
        last_diff = 0.0;
        for (a, b) in prev.iter().zip(&cur) {
            let d = (a - b).abs();
            last_diff = last_diff.max(d);
            if !(d <= settings.tol * (1.0 + b.abs())) {
                ok = false;
            }
        }
        if ok {
            return Ok(cur);
        }
        prev = cur;
    }
}

/// Scalar convenience wrapper around [`refine`].
pub fn refine_scalar<F>(what: &str, dim: usize, measure: Measure, settings: Refinement, f: F) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    refine(what, dim, measure, 1, settings, |x, out| out[0] = f(x)).map(|v| v[0])
}
