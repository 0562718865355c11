//! Even product kernels `K(u) = ∏ⱼ k_P(uⱼ)` of order P.
//!
//! The one-dimensional factor is `k_P(t) = p(t) φ(t)` with `p` an even
//! polynomial of degree P − 2 whose coefficients solve
//! `∫ k_P = 1` and `∫ t^{2m} k_P = 0` for `1 ≤ m < P/2`.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::quadrature::{self, GaussHermite, Measure, Refinement};

/// Orders we construct kernels for.
pub const SUPPORTED_ORDERS: [u32; 4] = [2, 4, 6, 8];

/// Multi-index `a = (a₁, …, a_d)` with order `[a] = Σ aⱼ`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MultiIndex(Vec<u32>);

impl MultiIndex {
    pub fn new(entries: Vec<u32>) -> Self {
        Self(entries)
    }

    pub fn entries(&self) -> &[u32] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn order(&self) -> u32 {
        self.0.iter().sum()
    }

    /// a! = a₁! ⋯ a_d!
    pub fn factorial(&self) -> f64 {
        self.0.iter().map(|&k| (1..=k).map(f64::from).product::<f64>()).product()
    }

    /// x^a = x₁^{a₁} ⋯ x_d^{a_d}
    pub fn monomial(&self, x: &[f64]) -> f64 {
        self.0.iter().zip(x).map(|(&k, &xi)| xi.powi(k as i32)).product()
    }

    /// All multi-indices of dimension `dim` with order exactly `order`,
    /// in lexicographic order.
    pub fn with_order(dim: usize, order: u32) -> Vec<MultiIndex> {
        fn rec(dim: usize, left: u32, prefix: &mut Vec<u32>, out: &mut Vec<MultiIndex>) {
            if prefix.len() == dim - 1 {
                prefix.push(left);
                out.push(MultiIndex(prefix.clone()));
                prefix.pop();
                return;
            }
            for k in (0..=left).rev() {
                prefix.push(k);
                rec(dim, left - k, prefix, out);
                prefix.pop();
            }
        }
        let mut out = Vec::new();
        rec(dim, order, &mut Vec::with_capacity(dim), &mut out);
        out
    }

    /// All multi-indices with order at most `max_order`, grouped by order.
    pub fn up_to_order(dim: usize, max_order: u32) -> Vec<MultiIndex> {
        (0..=max_order).flat_map(|k| Self::with_order(dim, k)).collect()
    }
}

impl fmt::Display for MultiIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, k) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ";")?;
            }
            write!(f, "{k}")?;
        }
        write!(f, ")")
    }
}

fn double_factorial_odd(k: u32) -> f64 {
    // (2k − 1)!! = E[Z^{2k}]
    (1..=k).map(|i| f64::from(2 * i - 1)).product()
}

/// Solves the defining moment system of the order-P one-dimensional factor.
fn solve_coefficients(order: u32) -> Vec<f64> {
    let m = (order / 2) as usize;
    let a = DMatrix::from_fn(m, m, |j, k| double_factorial_odd((j + k) as u32));
    let mut rhs = DVector::zeros(m);
    rhs[0] = 1.0;
    let lu = a.clone().lu();
    let mut c = lu.solve(&rhs).expect("moment system is non-singular");
    // one step of iterative refinement
    let r = &rhs - &a * &c;
    if let Some(dc) = lu.solve(&r) {
        c += dc;
    }
    c.iter().copied().collect()
}

/// Product polynomial-times-Gaussian kernel with its moment and roughness tables.
#[derive(Debug, Clone)]
pub struct Kernel {
    dim: usize,
    order: u32,
    coeffs: Vec<f64>,
    norm: f64,
    moments_p: BTreeMap<MultiIndex, f64>,
    roughness: DMatrix<f64>,
}

impl Kernel {
    /// Standard d-dimensional Gaussian density (order 2).
    pub fn gaussian(dim: usize) -> Result<Self> {
        Self::higher_order(dim, 2)
    }

    pub fn higher_order(dim: usize, order: u32) -> Result<Self> {
        if !SUPPORTED_ORDERS.contains(&order) {
            return Err(Error::Config(format!(
                "kernel order {order} is not supported; allowed orders are {SUPPORTED_ORDERS:?}"
            )));
        }
        Self::from_coefficients(dim, order, solve_coefficients(order))
    }

    /// Builds a kernel from raw polynomial coefficients without checking the
    /// moment system. Used to inject faults into [`verify_moments`].
    pub fn from_coefficients(dim: usize, order: u32, coeffs: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("kernel dimension must be at least 1".into()));
        }
        if order < 2 || !order.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel order must be an even integer ≥ 2, got {order}")));
        }
        let mut kernel = Kernel {
            dim,
            order,
            coeffs,
            norm: (2.0 * std::f64::consts::PI).powf(-0.5 * dim as f64),
            moments_p: BTreeMap::new(),
            roughness: DMatrix::zeros(dim, dim),
        };
        kernel.moments_p = kernel.compute_moments_p()?;
        kernel.roughness = roughness_matrix(&kernel)?;
        Ok(kernel)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn order(&self) -> u32 {
        self.order
    }

    /// Coefficients of `p(t) = Σ c_m t^{2m}`.
    pub fn coefficients(&self) -> &[f64] {
        &self.coeffs
    }

    /// μ_a for every multi-index with [a] = P.
    pub fn moments_p(&self) -> &BTreeMap<MultiIndex, f64> {
        &self.moments_p
    }

    /// ∫ K̇ K̇′
    pub fn roughness(&self) -> &DMatrix<f64> {
        &self.roughness
    }

    /// Largest absolute residual of the defining moment system.
    pub fn coefficient_residual(&self) -> f64 {
        let m = (self.order / 2) as usize;
        (0..m)
            .map(|j| {
                let lhs: f64 = self
                    .coeffs
                    .iter()
                    .enumerate()
                    .map(|(k, c)| c * double_factorial_odd((j + k) as u32))
                    .sum();
                (lhs - if j == 0 { 1.0 } else { 0.0 }).abs()
            })
            .fold(0.0, f64::max)
    }

    #[inline]
    fn poly(&self, t: f64) -> f64 {
        let t2 = t * t;
        self.coeffs.iter().rev().fold(0.0, |acc, &c| acc * t2 + c)
    }

    /// p′(t) − t p(t), so that k_P′(t) = (p′(t) − t p(t)) φ(t).
    #[inline]
    fn dpoly(&self, t: f64) -> f64 {
        let t2 = t * t;
        let mut dp = 0.0;
        for (m, &c) in self.coeffs.iter().enumerate().skip(1).rev() {
            dp = dp * t2 + 2.0 * m as f64 * c;
        }
        // dp currently holds Σ 2m c_m t^{2m−2}; multiply by t for p′
        t * dp - t * self.poly(t)
    }

    /// One-dimensional factor k_P(t).
    pub fn factor(&self, t: f64) -> f64 {
        self.poly(t) * crate::normal::pdf(t)
    }

    /// Derivative of the one-dimensional factor.
    pub fn factor_derivative(&self, t: f64) -> f64 {
        self.dpoly(t) * crate::normal::pdf(t)
    }

    /// K(u)
    pub fn eval(&self, u: &[f64]) -> f64 {
        debug_assert_eq!(u.len(), self.dim);
        let r2: f64 = u.iter().map(|t| t * t).sum();
        let p: f64 = u.iter().map(|&t| self.poly(t)).product();
        self.norm * (-0.5 * r2).exp() * p
    }

    /// K̇(u), written into `out`.
    #[inline]
    pub fn grad(&self, u: &[f64], out: &mut [f64]) {
        debug_assert_eq!(u.len(), self.dim);
        let r2: f64 = u.iter().map(|t| t * t).sum();
        let g = self.norm * (-0.5 * r2).exp();
        if self.order == 2 {
            for (o, &t) in out.iter_mut().zip(u) {
                *o = -t * g;
            }
            return;
        }
        if self.dim == 1 {
            out[0] = g * self.dpoly(u[0]);
            return;
        }
        for k in 0..self.dim {
            let mut v = g * self.dpoly(u[k]);
            for (j, &t) in u.iter().enumerate() {
                if j != k {
                    v *= self.poly(t);
                }
            }
            out[k] = v;
        }
    }

    /// K̇(u)/φ_d(u), i.e. the gradient with the Gaussian envelope removed. Used
    /// as an integrand against the standard normal weight.
    pub fn grad_polynomial(&self, u: &[f64], out: &mut [f64]) {
        for k in 0..self.dim {
            let mut v = self.dpoly(u[k]);
            for (j, &t) in u.iter().enumerate() {
                if j != k {
                    v *= self.poly(t);
                }
            }
            out[k] = v;
        }
    }

    fn rule_size(&self) -> usize {
        // exact for u^a K(u) with [a] ≤ P; doubled once for the convergence check
        (self.order as usize + 2).max(4)
    }

    fn compute_moments_p(&self) -> Result<BTreeMap<MultiIndex, f64>> {
        let indices = MultiIndex::with_order(self.dim, self.order);
        let values = integrate_moments(self, &indices, Refinement::with_tol(1e-10))?;
        Ok(indices.into_iter().zip(values).collect())
    }
}

/// ∫ u^a K(u) du for each index, refined until successive levels agree.
fn integrate_moments(kernel: &Kernel, indices: &[MultiIndex], settings: Refinement) -> Result<Vec<f64>> {
    let d = kernel.dim;
    let eval = |m: usize| {
        quadrature::tensor(&GaussHermite::new(m), d, Measure::Lebesgue { scale: 1.0 }, indices.len(), |u, out| {
            let k = kernel.eval(u);
            for (o, a) in out.iter_mut().zip(indices) {
                *o = a.monomial(u) * k;
            }
        })
    };
    let mut m = kernel.rule_size();
    let mut prev = eval(m);
    loop {
        let next = (2 * m).min(quadrature::MAX_NODES);
        if next == m || (next as f64).powi(d as i32) > settings.max_points as f64 {
            // report the worst index of the last comparison
            return Err(Error::Quadrature { what: "kernel moments".into(), diff: f64::NAN, tol: settings.tol });
        }
        m = next;
        let cur = eval(m);
        let bad = prev
            .iter()
            .zip(&cur)
            .zip(indices)
            .find(|((a, b), _)| !((*a - *b).abs() <= settings.tol * (1.0 + b.abs())));
        match bad {
            None => return Ok(cur),
            Some(((a, b), idx)) if m >= 64 => {
                return Err(Error::Quadrature {
                    what: format!("kernel moment {idx}"),
                    diff: (a - b).abs(),
                    tol: settings.tol,
                })
            }
            Some(_) => prev = cur,
        }
    }
}

/// ∫ K̇(u) K̇(u)′ du by tensor quadrature, symmetrised and checked for
/// positive definiteness.
pub fn roughness_matrix(kernel: &Kernel) -> Result<DMatrix<f64>> {
    let d = kernel.dim;
    let mut grad = vec![0.0; d];
    let flat = quadrature::refine(
        "roughness matrix",
        d,
        Measure::Lebesgue { scale: std::f64::consts::FRAC_1_SQRT_2 },
        d * d,
        Refinement { tol: 1e-12, start: kernel.rule_size(), max_points: 2_000_000 },
        |u, out| {
            kernel.grad(u, &mut grad);
            for i in 0..d {
                for j in 0..d {
                    out[i * d + j] = grad[i] * grad[j];
                }
            }
        },
    )?;
    let r = DMatrix::from_row_slice(d, d, &flat);
    let r = (&r + r.transpose()) * 0.5;
    let min_eig = SymmetricEigen::new(r.clone()).eigenvalues.min();
    if !(min_eig > 0.0) {
        return Err(Error::Assumption(format!(
            "roughness matrix is not positive definite (smallest eigenvalue {min_eig:.3e})"
        )));
    }
    Ok(r)
}

/// One row of a moment report.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentRow {
    pub index: MultiIndex,
    pub value: f64,
    pub target: f64,
    pub abs_error: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentReport {
    pub rows: Vec<MomentRow>,
    /// ∫ |K| (1 + ‖u‖^P)
    pub weighted_abs_mass: f64,
    /// ∫ ‖K̇‖ (1 + ‖u‖²)
    pub weighted_grad_mass: f64,
    pub tails_finite: bool,
}

impl MomentReport {
    pub fn all_pass(&self) -> bool {
        self.tails_finite && self.rows.iter().all(|r| r.pass)
    }
}

/// Checks the vanishing-moment conditions for every index with [a] ≤ P.
pub fn verify_moments(kernel: &Kernel, tol: f64) -> Result<MomentReport> {
    if !(tol > 0.0) {
        return Err(Error::Config(format!("moment tolerance must be positive, got {tol}")));
    }
    let indices = MultiIndex::up_to_order(kernel.dim, kernel.order);
    let values = integrate_moments(kernel, &indices, Refinement::with_tol(tol.min(1e-8)))?;
    let rows = indices
        .into_iter()
        .zip(values)
        .map(|(index, value)| {
            let target = match index.order() {
                0 => 1.0,
                o if o < kernel.order => 0.0,
                _ => kernel.moments_p.get(&index).copied().unwrap_or(0.0),
            };
            let abs_error = (value - target).abs();
            MomentRow { index, value, target, abs_error, pass: abs_error <= tol }
        })
        .collect();

    // Absolute-value integrands have kinks, so only boundedness is checked.
    let d = kernel.dim;
    let m = match d {
        1 => 96,
        2 => 48,
        3 => 24,
        _ => 12,
    };
    let p = kernel.order as i32;
    let mut grad = vec![0.0; d];
    let masses = quadrature::tensor(&GaussHermite::new(m), d, Measure::Lebesgue { scale: 1.0 }, 2, |u, out| {
        let r2: f64 = u.iter().map(|t| t * t).sum();
        out[0] = kernel.eval(u).abs() * (1.0 + r2.sqrt().powi(p));
        kernel.grad(u, &mut grad);
        out[1] = grad.iter().map(|g| g * g).sum::<f64>().sqrt() * (1.0 + r2);
    });
    let tails_finite = masses.iter().all(|v| v.is_finite() && *v < 1e12);
    Ok(MomentReport { rows, weighted_abs_mass: masses[0], weighted_grad_mass: masses[1], tails_finite })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn multi_index_enumeration() {
        let idx = MultiIndex::with_order(2, 2);
        assert_eq!(idx.len(), 3);
        assert!(idx.iter().all(|a| a.order() == 2));
        assert_eq!(MultiIndex::up_to_order(3, 2).len(), 10);
        let a = MultiIndex::new(vec![2, 1]);
        assert_eq!(a.factorial(), 2.0);
        assert_eq!(a.monomial(&[3.0, 2.0]), 18.0);
        assert_eq!(a.to_string(), "(2;1)");
    }

    #[test]
    fn order_four_coefficients() {
        let k = Kernel::higher_order(1, 4).unwrap();
        let c = k.coefficients();
        assert!((c[0] - 1.5).abs() < 1e-15 && (c[1] + 0.5).abs() < 1e-15);
        assert!((k.moments_p()[&MultiIndex::new(vec![4])] + 3.0).abs() < 1e-10);
    }

    #[test]
    fn coefficient_systems_are_solved_to_machine_precision() {
        for p in SUPPORTED_ORDERS {
            let k = Kernel::higher_order(1, p).unwrap();
            assert!(k.coefficient_residual() < 1e-12, "P={p}: {}", k.coefficient_residual());
        }
    }

    #[test]
    fn unsupported_order_names_allowed_set() {
        let err = Kernel::higher_order(1, 3).unwrap_err();
        assert!(err.to_string().contains("[2, 4, 6, 8]"));
        assert!(Kernel::higher_order(1, 10).is_err());
        assert!(Kernel::higher_order(0, 2).is_err());
    }

    #[test]
    fn gaussian_values() {
        let k = Kernel::gaussian(1).unwrap();
        assert_eq!(k.eval(&[0.3]), k.eval(&[-0.3]));
        assert_eq!(k.eval(&[1.7]), k.eval(&[-1.7]));
        assert!((k.roughness()[(0, 0)] - 1.0 / (4.0 * PI.sqrt())).abs() < 1e-14);
        assert!((k.moments_p()[&MultiIndex::new(vec![2])] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gaussian_two_dim_roughness_is_diagonal() {
        let k = Kernel::gaussian(2).unwrap();
        let r = k.roughness();
        assert!(r[(0, 1)].abs() < 1e-10 && r[(1, 0)].abs() < 1e-10);
        // ∫ (u φ(u))² du · ∫ φ² = 1/(4√π) · 1/(2√π)
        let expect = 1.0 / (8.0 * PI);
        assert!((r[(0, 0)] - expect).abs() < 1e-14);
        assert_eq!(r[(0, 0)], r[(1, 1)]);
    }

    #[test]
    fn mixed_moment_vanishes_in_two_dims() {
        let k = Kernel::higher_order(2, 4).unwrap();
        let report = verify_moments(&k, 1e-6).unwrap();
        let row = report.rows.iter().find(|r| r.index == MultiIndex::new(vec![1, 1])).unwrap();
        assert!(row.value.abs() < 1e-12 && row.pass);
        assert!(report.all_pass());
    }

    #[test]
    fn corrupted_coefficients_are_detected() {
        let mut c = Kernel::higher_order(1, 4).unwrap().coefficients().to_vec();
        c[0] += 1e-3;
        let bad = Kernel::from_coefficients(1, 4, c).unwrap();
        let report = verify_moments(&bad, 1e-6).unwrap();
        let row = report.rows.iter().find(|r| r.index == MultiIndex::new(vec![2])).unwrap();
        assert!(!row.pass);
        assert!(!report.all_pass());
    }

    #[test]
    fn tails_are_bounded() {
        for p in SUPPORTED_ORDERS {
            let report = verify_moments(&Kernel::higher_order(2, p).unwrap(), 1e-6).unwrap();
            assert!(report.tails_finite, "P={p}");
            assert!(report.all_pass(), "P={p}");
        }
    }

    #[test]
    fn zero_tolerance_is_rejected() {
        let k = Kernel::gaussian(1).unwrap();
        assert!(matches!(verify_moments(&k, 0.0), Err(Error::Config(_))));
    }
}
