//! The density-weighted average derivative estimator as a second-order U-statistic.
//!
//! For i < j the pair kernel is
//! `Uᵢⱼ = −h^{−d−1} K̇((Xᵢ − Xⱼ)/h) (Yᵢ − Yⱼ)`, which is symmetric in (i, j)
//! because K̇ is odd. One pass over unordered pairs yields θ̂, the leave-one-out
//! row means, and Σ UU′, from which every variance estimator follows.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernel::Kernel;
use crate::normal;
use crate::par::{self, Execution};
use crate::summation::Compensated;

/// n observations (Yᵢ, Xᵢ) with Xᵢ ∈ ℝᵈ. Covariates are stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    y: Vec<f64>,
    x: Vec<f64>,
    dim: usize,
}

impl Sample {
    pub fn new(y: Vec<f64>, x: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Data("covariate dimension must be at least 1".into()));
        }
        let n = y.len();
        if x.len() != n * dim {
            return Err(Error::Data(format!(
                "covariate array has {} entries, expected n·d = {}·{}",
                x.len(),
                n,
                dim
            )));
        }
        if n < 3 {
            return Err(Error::Data(format!("need at least 3 observations, got {n}")));
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite outcome in row {}", i + 1)));
        }
        if let Some(k) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite covariate in row {}, column {}", k / dim + 1, k % dim + 1)));
        }
        Ok(Self { y, x, dim })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    /// Row-major covariates.
    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn x_row(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    /// Resample rows by index (with repetition allowed).
    pub fn select(&self, rows: &[usize]) -> Result<Sample> {
        let y = rows.iter().map(|&i| self.y[i]).collect();
        let x = rows.iter().flat_map(|&i| self.x_row(i).iter().copied()).collect();
        Sample::new(y, x, self.dim)
    }
}

/// Which studentizer to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum VarianceKind {
    /// Plug-in variance n⁻¹Σ̂ from the asymptotic-linear representation.
    Al,
    /// Small-bandwidth-robust n⁻¹Σ̂ − C(n,2)⁻¹h^{−d−2}Δ̂.
    Sb,
}

impl VarianceKind {
    pub fn label(self) -> &'static str {
        match self {
            VarianceKind::Al => "AL",
            VarianceKind::Sb => "SB",
        }
    }
}

/// Point estimate together with the pairwise aggregates behind both variance estimators.
#[derive(Debug, Clone, PartialEq)]
pub struct DwadFit {
    pub theta_hat: DVector<f64>,
    pub n: usize,
    pub h: f64,
    /// Row i is (n−1)⁻¹ Σ_{j≠i} Uᵢⱼ.
    pub u_row_means: DMatrix<f64>,
    pub sigma_hat: DMatrix<f64>,
    pub delta_hat: DMatrix<f64>,
    pub v_al: DMatrix<f64>,
    pub v_sb: DMatrix<f64>,
}

impl DwadFit {
    pub fn dim(&self) -> usize {
        self.theta_hat.len()
    }

    /// L̂ᵢ = 2[(n−1)⁻¹Σ_{j≠i}Uᵢⱼ − θ̂]
    pub fn l_hat(&self, i: usize) -> DVector<f64> {
        (self.u_row_means.row(i).transpose() - &self.theta_hat) * 2.0
    }

    pub fn variance(&self, kind: VarianceKind) -> &DMatrix<f64> {
        match kind {
            VarianceKind::Al => &self.v_al,
            VarianceKind::Sb => &self.v_sb,
        }
    }
}

/// Endpoints v′θ̂ ± c_α ϑ̂_v.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalEstimate {
    pub direction: Vec<f64>,
    pub center: f64,
    pub half_width: f64,
    pub alpha: f64,
    pub variance_kind: VarianceKind,
}

impl IntervalEstimate {
    pub fn lower(&self) -> f64 {
        self.center - self.half_width
    }

    pub fn upper(&self) -> f64 {
        self.center + self.half_width
    }

    pub fn contains(&self, value: f64) -> bool {
        self.lower() <= value && value <= self.upper()
    }
}

/// C(n, 2) as a float.
#[inline]
pub fn pairs(n: usize) -> f64 {
    let n = n as f64;
    0.5 * n * (n - 1.0)
}

fn check_inputs(sample: &Sample, kernel: &Kernel, h: f64) -> Result<()> {
    if kernel.dim() != sample.dim() {
        return Err(Error::Config(format!(
            "kernel dimension {} does not match data dimension {}",
            kernel.dim(),
            sample.dim()
        )));
    }
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Config(format!("bandwidth must be positive and finite, got {h}")));
    }
    Ok(())
}

/// Splits rows 0..n into contiguous blocks with roughly equal numbers of
/// (i < j) pairs. Depends on n only, so results do not depend on threading.
fn row_blocks(n: usize) -> Vec<(usize, usize)> {
    let blocks = (n / 32).clamp(1, 64);
    let total = pairs(n);
    let mut out = Vec::with_capacity(blocks);
    let mut start = 0;
    let mut done = 0.0;
    for b in 1..=blocks {
        let target = total * b as f64 / blocks as f64;
        let mut end = start;
        while end < n && (done < target || b == blocks) {
            done += (n - 1 - end) as f64;
            end += 1;
        }
        if end > start {
            out.push((start, end));
        }
        start = end;
    }
    out
}

struct BlockSums {
    total: Vec<Compensated>,
    outer: Vec<Compensated>,
    rows: Vec<Compensated>,
}

fn block_sums(sample: &Sample, kernel: &Kernel, h: f64, (lo, hi): (usize, usize)) -> BlockSums {
    let n = sample.n();
    let d = sample.dim();
    let scale = -h.powi(-(d as i32) - 1);
    let inv_h = 1.0 / h;
    let mut total = vec![Compensated::ZERO; d];
    let mut outer = vec![Compensated::ZERO; d * d];
    let mut rows = vec![Compensated::ZERO; n * d];
    let mut u = vec![0.0; d];
    let mut g = vec![0.0; d];
    let y = sample.y();
    let x = sample.x();
    for i in lo..hi {
        let xi = &x[i * d..(i + 1) * d];
        for j in i + 1..n {
            let xj = &x[j * d..(j + 1) * d];
            for k in 0..d {
                u[k] = (xi[k] - xj[k]) * inv_h;
            }
            kernel.grad(&u, &mut g);
            let dy = scale * (y[i] - y[j]);
            for k in 0..d {
                let uk = g[k] * dy;
                g[k] = uk;
                total[k].add(uk);
                rows[i * d + k].add(uk);
                rows[j * d + k].add(uk);
            }
            for a in 0..d {
                for b in a..d {
                    outer[a * d + b].add(g[a] * g[b]);
                }
            }
        }
    }
    BlockSums { total, outer, rows }
}

/// Full estimator using the default execution mode.
pub fn estimate(sample: &Sample, kernel: &Kernel, h: f64) -> Result<DwadFit> {
    estimate_with(sample, kernel, h, Execution::default())
}

/// Full estimator; `exec` only affects scheduling, never the result.
pub fn estimate_with(sample: &Sample, kernel: &Kernel, h: f64, exec: Execution) -> Result<DwadFit> {
    check_inputs(sample, kernel, h)?;
    let n = sample.n();
    let d = sample.dim();
    let blocks = row_blocks(n);
    let partial = par::map_indexed(blocks.len(), exec, |b| block_sums(sample, kernel, h, blocks[b]));

    let mut total = vec![Compensated::ZERO; d];
    let mut outer = vec![Compensated::ZERO; d * d];
    let mut rows = vec![Compensated::ZERO; n * d];
    for p in &partial {
        for (a, b) in total.iter_mut().zip(&p.total) {
            a.merge(b);
        }
        for (a, b) in outer.iter_mut().zip(&p.outer) {
            a.merge(b);
        }
        for (a, b) in rows.iter_mut().zip(&p.rows) {
            a.merge(b);
        }
    }

    let npairs = pairs(n);
    let theta_hat = DVector::from_iterator(d, total.iter().map(|c| c.value() / npairs));
    let u_row_means = DMatrix::from_fn(n, d, |i, k| rows[i * d + k].value() / (n as f64 - 1.0));

    let mut sigma = vec![Compensated::ZERO; d * d];
    let mut l = vec![0.0; d];
    for i in 0..n {
        for k in 0..d {
            l[k] = 2.0 * (u_row_means[(i, k)] - theta_hat[k]);
        }
        for a in 0..d {
            for b in a..d {
                sigma[a * d + b].add(l[a] * l[b]);
            }
        }
    }
    let sym = |acc: &[Compensated], norm: f64| {
        DMatrix::from_fn(d, d, |a, b| {
            let (a, b) = if a <= b { (a, b) } else { (b, a) };
            acc[a * d + b].value() / norm
        })
    };
    let sigma_hat = sym(&sigma, n as f64);
    let hd2 = h.powi(d as i32 + 2);
    let delta_hat = sym(&outer, npairs) * hd2;
    let v_al = &sigma_hat / n as f64;
    let v_sb = &v_al - &delta_hat * (1.0 / (npairs * hd2));
    Ok(DwadFit { theta_hat, n, h, u_row_means, sigma_hat, delta_hat, v_al, v_sb })
}

/// θ̂ alone, sequentially. Used where millions of replications need only the
/// point estimate.
pub fn theta_hat(sample: &Sample, kernel: &Kernel, h: f64) -> Result<DVector<f64>> {
    check_inputs(sample, kernel, h)?;
    let n = sample.n();
    let d = sample.dim();
    let y = sample.y();
    let x = sample.x();
    let inv_h = 1.0 / h;
    let mut total = vec![Compensated::ZERO; d];
    if d == 1 && kernel.order() == 2 {
        // K̇(u) = −u φ(u); the per-row sum is short enough for a plain accumulator.
        for i in 0..n {
            let mut row = 0.0;
            for j in i + 1..n {
                let u = (x[i] - x[j]) * inv_h;
                row += u * (-0.5 * u * u).exp() * (y[i] - y[j]);
            }
            total[0].add(row);
        }
        let c = normal::INV_SQRT_2PI * h.powi(-2) / pairs(n);
        return Ok(DVector::from_element(1, total[0].value() * c));
    }
    let mut u = vec![0.0; d];
    let mut g = vec![0.0; d];
    for i in 0..n {
        for j in i + 1..n {
            for k in 0..d {
                u[k] = (x[i * d + k] - x[j * d + k]) * inv_h;
            }
            kernel.grad(&u, &mut g);
            let dy = y[i] - y[j];
            for k in 0..d {
                total[k].add(g[k] * dy);
            }
        }
    }
    let c = -h.powi(-(d as i32) - 1) / pairs(n);
    Ok(DVector::from_iterator(d, total.iter().map(|t| t.value() * c)))
}

/// V̂_AL = n⁻¹Σ̂
pub fn variance_al(fit: &DwadFit) -> DMatrix<f64> {
    fit.v_al.clone()
}

/// V̂_SB and whether it is positive semi-definite.
pub fn variance_sb(fit: &DwadFit) -> (DMatrix<f64>, bool) {
    let v = fit.v_sb.clone();
    let scale = v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    let min_eig = nalgebra::SymmetricEigen::new(v.clone()).eigenvalues.min();
    let psd = min_eig >= -1e-12 * scale;
    (v, psd)
}

/// v′Mv
pub fn quadratic_form(m: &DMatrix<f64>, v: &[f64]) -> f64 {
    let d = v.len();
    let mut acc = Compensated::ZERO;
    for a in 0..d {
        for b in 0..d {
            acc.add(v[a] * m[(a, b)] * v[b]);
        }
    }
    acc.value()
}

fn check_direction(fit: &DwadFit, v: &[f64]) -> Result<()> {
    if v.len() != fit.dim() {
        return Err(Error::Config(format!("direction has {} entries, expected {}", v.len(), fit.dim())));
    }
    if v.iter().any(|x| !x.is_finite()) || v.iter().all(|&x| x == 0.0) {
        return Err(Error::Config("direction must be finite and non-zero".into()));
    }
    Ok(())
}

/// v′θ̂ and ϑ̂_v = √(v′V̂v), or a degenerate-variance error.
pub fn projected(fit: &DwadFit, v: &[f64], kind: VarianceKind) -> Result<(f64, f64)> {
    check_direction(fit, v)?;
    let center: f64 = v.iter().zip(fit.theta_hat.iter()).map(|(a, b)| a * b).sum();
    let q = quadratic_form(fit.variance(kind), v);
    if !(q > 0.0) {
        return Err(Error::DegenerateVariance { value: q });
    }
    Ok((center, q.sqrt()))
}

/// (v′θ̂ − θ₀)/√(v′V̂v)
pub fn t_statistic(fit: &DwadFit, v: &[f64], theta0_v: f64, kind: VarianceKind) -> Result<f64> {
    let (center, se) = projected(fit, v, kind)?;
    Ok((center - theta0_v) / se)
}

pub fn confidence_interval(fit: &DwadFit, v: &[f64], alpha: f64, kind: VarianceKind) -> Result<IntervalEstimate> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let (center, se) = projected(fit, v, kind)?;
    Ok(IntervalEstimate {
        direction: v.to_vec(),
        center,
        half_width: normal::two_sided_critical(alpha) * se,
        alpha,
        variance_kind: kind,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Sample {
        Sample::new(vec![0.0, 1.0, 2.0], vec![0.0, 1.0, -1.0], 1).unwrap()
    }

    #[test]
    fn blocks_cover_all_rows() {
        for n in [3, 4, 31, 32, 100, 1000, 5003] {
            let b = row_blocks(n);
            assert_eq!(b[0].0, 0);
            assert_eq!(b.last().unwrap().1, n);
            for w in b.windows(2) {
                assert_eq!(w[0].1, w[1].0);
            }
        }
    }

    #[test]
    fn three_point_example_by_hand() {
        // Uᵢⱼ = h⁻² uφ(u)(yᵢ − yⱼ) with u = xᵢ − xⱼ at h = 1
        let phi = normal::pdf;
        let u01 = -phi(-1.0) * (0.0 - 1.0);
        let u02 = 1.0 * phi(1.0) * (0.0 - 2.0);
        let u12 = 2.0 * phi(2.0) * (1.0 - 2.0);
        let theta = (u01 + u02 + u12) / 3.0;
        let k = Kernel::gaussian(1).unwrap();
        let fit = estimate(&tiny(), &k, 1.0).unwrap();
        assert!((fit.theta_hat[0] - theta).abs() <= 1e-15 * theta.abs());
        let rows = [(u01 + u02) / 2.0, (u01 + u12) / 2.0, (u02 + u12) / 2.0];
        let sigma: f64 = rows.iter().map(|r| 4.0 * (r - theta).powi(2)).sum::<f64>() / 3.0;
        assert!((fit.sigma_hat[(0, 0)] - sigma).abs() <= 1e-14 * sigma);
        let delta = (u01 * u01 + u02 * u02 + u12 * u12) / 3.0;
        assert!((fit.delta_hat[(0, 0)] - delta).abs() <= 1e-14 * delta);
        let t = t_statistic(&fit, &[1.0], 0.0, VarianceKind::Al).unwrap();
        assert!((t - theta / (sigma / 3.0).sqrt()).abs() <= 1e-12 * t.abs());
    }

    #[test]
    fn constant_outcomes_give_zero_everything() {
        let s = Sample::new(vec![2.5; 6], vec![0.1, -0.3, 0.7, 1.1, -2.0, 0.0], 1).unwrap();
        let fit = estimate(&s, &Kernel::gaussian(1).unwrap(), 0.5).unwrap();
        assert_eq!(fit.theta_hat[0], 0.0);
        assert_eq!(fit.delta_hat[(0, 0)], 0.0);
        assert_eq!(variance_al(&fit)[(0, 0)], 0.0);
        let (sb, psd) = variance_sb(&fit);
        assert_eq!(sb[(0, 0)], 0.0);
        assert!(psd);
        assert!(matches!(
            t_statistic(&fit, &[1.0], 0.0, VarianceKind::Sb),
            Err(Error::DegenerateVariance { .. })
        ));
    }

    #[test]
    fn sequential_and_parallel_agree_bitwise() {
        let n = 300;
        let x: Vec<f64> = (0..2 * n).map(|i| ((i * 7919) % 1000) as f64 / 300.0 - 1.6).collect();
        let y: Vec<f64> = (0..n).map(|i| ((i * 104_729) % 997) as f64 / 500.0).collect();
        let s = Sample::new(y, x, 2).unwrap();
        let k = Kernel::higher_order(2, 4).unwrap();
        let a = estimate_with(&s, &k, 0.4, Execution::Sequential).unwrap();
        let b = estimate_with(&s, &k, 0.4, Execution::Parallel).unwrap();
        assert_eq!(a, b);
        let t = theta_hat(&s, &k, 0.4).unwrap();
        assert!((t[0] - a.theta_hat[0]).abs() <= 1e-12 * a.theta_hat.norm());
    }

    #[test]
    fn fast_theta_matches_full_fit() {
        let s = Sample::new(vec![0.3, -1.0, 2.0, 0.5, 1.5], vec![0.2, 1.0, -0.4, 0.9, -1.3], 1).unwrap();
        let k = Kernel::gaussian(1).unwrap();
        let full = estimate(&s, &k, 0.7).unwrap();
        let fast = theta_hat(&s, &k, 0.7).unwrap();
        assert!((full.theta_hat[0] - fast[0]).abs() <= 1e-14 * full.theta_hat[0].abs());
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(Sample::new(vec![1.0, 2.0], vec![0.0, 1.0], 1), Err(Error::Data(_))));
        assert!(matches!(Sample::new(vec![1.0, f64::NAN, 0.0], vec![0.0, 1.0, 2.0], 1), Err(Error::Data(_))));
        let k = Kernel::gaussian(2).unwrap();
        assert!(matches!(estimate(&tiny(), &k, 1.0), Err(Error::Config(_))));
        let k = Kernel::gaussian(1).unwrap();
        assert!(matches!(estimate(&tiny(), &k, 0.0), Err(Error::Config(_))));
        let fit = estimate(&tiny(), &k, 1.0).unwrap();
        assert!(matches!(confidence_interval(&fit, &[1.0], 1.0, VarianceKind::Al), Err(Error::Config(_))));
    }

    #[test]
    fn unit_quantile_interval() {
        let fit = estimate(&tiny(), &Kernel::gaussian(1).unwrap(), 1.0).unwrap();
        let alpha = 2.0 * (1.0 - normal::cdf(1.0));
        let ci = confidence_interval(&fit, &[1.0], alpha, VarianceKind::Al).unwrap();
        let se = fit.v_al[(0, 0)].sqrt();
        assert!((ci.half_width - se).abs() <= 1e-12 * se);
    }
}
