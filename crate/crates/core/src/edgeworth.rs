//! Edgeworth approximations for the standardized and studentized estimator,
//! and for a generic second-order U-statistic.

use crate::error::{Error, Result};
use crate::normal;

/// Probabilists' Hermite polynomial Hₖ(x), by H_{k+1} = x Hₖ − k H_{k−1}.
pub fn hermite(k: usize, x: f64) -> f64 {
    assert!(k <= 12, "Hermite order {k} exceeds 12");
    let (mut prev, mut cur) = (0.0, 1.0);
    for j in 0..k {
        let next = x * cur - j as f64 * prev;
        prev = cur;
        cur = next;
    }
    cur
}

/// Constants entering the expansions for the estimator along a direction v.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DwadExpansionInputs {
    pub n: usize,
    pub h: f64,
    pub d: usize,
    pub p: u32,
    pub sigma_v: f64,
    pub delta_v2: f64,
    pub beta_v: f64,
    pub kappa1_v: f64,
    pub kappa2_v: f64,
    /// ω_v²/ϑ_v²; one when the statistic is standardized by ω_v.
    pub vartheta_ratio: f64,
}

impl DwadExpansionInputs {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::Config(format!("n must be at least 2, got {}", self.n)));
        }
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(Error::Config(format!("bandwidth must be positive, got {}", self.h)));
        }
        if !(self.sigma_v > 0.0 && self.sigma_v.is_finite()) {
            return Err(Error::Config(format!("sigma_v must be positive, got {}", self.sigma_v)));
        }
        if !(self.delta_v2 >= 0.0 && self.delta_v2.is_finite()) {
            return Err(Error::Config(format!("delta_v2 must be non-negative, got {}", self.delta_v2)));
        }
        if !(self.vartheta_ratio > 0.0 && self.vartheta_ratio.is_finite()) {
            return Err(Error::Config(format!("vartheta_ratio must be positive, got {}", self.vartheta_ratio)));
        }
        if ![self.beta_v, self.kappa1_v, self.kappa2_v].iter().all(|v| v.is_finite()) {
            return Err(Error::Config("beta_v, kappa1_v and kappa2_v must be finite".into()));
        }
        if !rn(self.n, self.h, self.p, self.d).is_finite() {
            return Err(Error::Config("r_n is not finite for these inputs".into()));
        }
        Ok(())
    }

    /// √n h^P β_v / σ_v
    pub fn bias_term(&self) -> f64 {
        (self.n as f64).sqrt() * self.h.powi(self.p as i32) * self.beta_v / self.sigma_v
    }

    /// δ_v² / (n h^{d+2} σ_v²)
    pub fn variance_term(&self) -> f64 {
        self.delta_v2 / (self.n as f64 * self.h.powi(self.d as i32 + 2) * self.sigma_v.powi(2))
    }

    fn skew_scale(&self) -> f64 {
        6.0 * (self.n as f64).sqrt() * self.sigma_v.powi(3)
    }
}

/// Which statistic an expansion or coverage prediction refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scheme {
    Standardized,
    StudentizedAl,
    StudentizedSb,
}

/// G(x) for (θ̂_v − θ_v)/ϑ_v.
pub fn std_expansion(inp: &DwadExpansionInputs, x: f64) -> f64 {
    let skew = (inp.kappa1_v + inp.kappa2_v) / inp.skew_scale();
    let bracket = inp.bias_term() + 0.5 * (inp.vartheta_ratio - 1.0) * x + skew * (x * x - 1.0);
    normal::cdf(x) - normal::pdf(x) * bracket
}

fn studentized_common(inp: &DwadExpansionInputs, x: f64) -> f64 {
    let s = inp.skew_scale();
    let shift = inp.bias_term() - (3.0 * inp.kappa1_v + 2.0 * inp.kappa2_v) / s;
    shift - (2.0 * inp.kappa1_v + inp.kappa2_v) / s * (x * x - 1.0)
}

/// Ĝ_AL(x) for the t-statistic studentized by V̂_AL.
pub fn studentized_al(inp: &DwadExpansionInputs, x: f64) -> f64 {
    let bracket = studentized_common(inp, x) - inp.variance_term() * x;
    normal::cdf(x) - normal::pdf(x) * bracket
}

/// Ĝ_SB(x) for the t-statistic studentized by V̂_SB.
pub fn studentized_sb(inp: &DwadExpansionInputs, x: f64) -> f64 {
    normal::cdf(x) - normal::pdf(x) * studentized_common(inp, x)
}

pub fn expansion(scheme: Scheme, inp: &DwadExpansionInputs, x: f64) -> f64 {
    match scheme {
        Scheme::Standardized => std_expansion(inp, x),
        Scheme::StudentizedAl => studentized_al(inp, x),
        Scheme::StudentizedSb => studentized_sb(inp, x),
    }
}

/// Predicted coverage of the two-sided level-(1−α) interval.
pub fn coverage_prediction(inp: &DwadExpansionInputs, alpha: f64, scheme: Scheme) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let c = normal::two_sided_critical(alpha);
    let pc = normal::pdf(c) * c;
    Ok(match scheme {
        Scheme::Standardized => 1.0 - alpha - (inp.vartheta_ratio - 1.0) * pc,
        Scheme::StudentizedAl => 1.0 - alpha + 2.0 * inp.variance_term() * pc,
        Scheme::StudentizedSb => 1.0 - alpha,
    })
}

/// r_n = √n h^P + (n h^{d+2})⁻¹ + n^{−1/2}
pub fn rn(n: usize, h: f64, p: u32, d: usize) -> f64 {
    let nf = n as f64;
    nf.sqrt() * h.powi(p as i32) + 1.0 / (nf * h.powi(d as i32 + 2)) + 1.0 / nf.sqrt()
}

/// Moments of the Hoeffding components of a generic second-order U-statistic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenericUstatInputs {
    pub n: usize,
    /// B = E[U] − θ
    pub bias: f64,
    /// ϑ > 0
    pub scale: f64,
    /// E[ℓ₁²]
    pub sigma_ell2: f64,
    /// E[q₁₂²]
    pub sigma_q2: f64,
    /// ϰ₁ = E[ℓ₁³]
    pub kappa_a: f64,
    /// ϰ₂ = E[ℓ₁ℓ₂q₁₂]
    pub kappa_b: f64,
}

impl GenericUstatInputs {
    /// ω² = n⁻¹σ_ℓ² + C(n,2)⁻¹σ_q²
    pub fn omega2(&self) -> f64 {
        let n = self.n as f64;
        self.sigma_ell2 / n + self.sigma_q2 / choose(self.n, 2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaCoefficients {
    /// γ₁ … γ₉ stored at indices 0 … 8.
    pub gamma: [f64; 9],
}

impl GammaCoefficients {
    pub fn zero() -> Self {
        Self { gamma: [0.0; 9] }
    }

    /// γⱼ with the 1-based index used in the formulas.
    pub fn get(&self, j: usize) -> f64 {
        self.gamma[j - 1]
    }
}

/// Binomial coefficient as a float.
fn choose(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

pub fn generic_gammas(inp: &GenericUstatInputs) -> Result<GammaCoefficients> {
    if !(inp.scale > 0.0 && inp.scale.is_finite()) {
        return Err(Error::Config(format!("scale ϑ must be positive, got {}", inp.scale)));
    }
    if inp.n < 2 {
        return Err(Error::Config(format!("n must be at least 2, got {}", inp.n)));
    }
    let n = inp.n as f64;
    let t = inp.scale;
    let t2 = t * t;
    let w2 = inp.omega2();
    let inv_c2 = 1.0 / choose(inp.n, 2);
    let c4 = choose(inp.n, 4) * inv_c2 * inv_c2;
    let (k1, k2) = (inp.kappa_a, inp.kappa_b);
    let lin_gap = inp.sigma_ell2 / n - t2;
    let g = [
        inp.bias / t,
        (w2 - t2) / (2.0 * t2),
        (k1 + 6.0 * k2) / (6.0 * n * n * t.powi(3)),
        (w2 - t2) / (4.0 * t2 * t2) * inv_c2 * inp.sigma_q2,
        (inv_c2 * k1 * inp.sigma_q2 + 6.0 * lin_gap * k2) / (12.0 * n * n * t.powi(5)),
        (k1 * k2 + 12.0 * c4 * k2 * k2) / (6.0 * n.powi(4) * t.powi(6)),
        0.0,
        lin_gap / (4.0 * n.powi(4) * t.powi(8)) * c4 * k2 * k2,
        c4 * k1 * k2 * k2 / (12.0 * n.powi(6) * t.powi(9)),
    ];
    Ok(GammaCoefficients { gamma: g })
}

/// Placement of γ₁ in the characteristic function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BiasConvention {
    /// exp(−t²/2)[1 + Σ_{j≥1}(ιt)ʲγⱼ]
    #[default]
    Bracket,
    /// exp(ιtγ₁ − t²/2)[1 + Σ_{j≥2}(ιt)ʲγⱼ]
    Exponent,
}

/// Ḡ(x) = Φ(x) − φ(x) Σⱼ γⱼ H_{j−1}(x) in the bracket convention; in the
/// exponent convention the same sum without γ₁ is evaluated at x − γ₁.
pub fn generic_cdf(g: &GammaCoefficients, x: f64, convention: BiasConvention) -> f64 {
    match convention {
        BiasConvention::Bracket => {
            let s: f64 = (1..=9).map(|j| g.get(j) * hermite(j - 1, x)).sum();
            normal::cdf(x) - normal::pdf(x) * s
        }
        BiasConvention::Exponent => {
            let z = x - g.get(1);
            let s: f64 = (2..=9).map(|j| g.get(j) * hermite(j - 1, z)).sum();
            normal::cdf(z) - normal::pdf(z) * s
        }
    }
}
