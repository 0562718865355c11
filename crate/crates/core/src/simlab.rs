//! Monte Carlo laboratory: replication ensembles, empirical CDFs, coverage,
//! the bootstrap variance-ratio diagnostic and the bias-constant check.
//!
//! Every replication draws from its own counter-based stream and results are
//! collected in replication order, so output depends on the configuration and
//! seed only.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::dgp::{self, DgpSpec, FiniteBandwidth, PopulationFunctionals};
use crate::dwad::{self, Sample, VarianceKind};
use crate::edgeworth::{self, DwadExpansionInputs, Scheme};
use crate::error::{Error, Result};
use crate::kernel::Kernel;
use crate::normal;
use crate::par::{self, Execution};
use crate::rng::{RandomStream, StreamRole};
use crate::summation::Compensated;

/// A statistic whose distribution the laboratory tracks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum StatScheme {
    /// (θ̂_v − θ_v)/(σ_v/√n)
    StandardizedSigma,
    /// (θ̂_v − θ_v)/ω̃_v
    StandardizedOmega,
    StudentizedAl,
    StudentizedSb,
}

impl StatScheme {
    pub const ALL: [StatScheme; 4] = [
        StatScheme::StandardizedSigma,
        StatScheme::StandardizedOmega,
        StatScheme::StudentizedAl,
        StatScheme::StudentizedSb,
    ];

    pub fn label(self) -> &'static str {
        match self {
            StatScheme::StandardizedSigma => "standardized_sigma",
            StatScheme::StandardizedOmega => "standardized_omega",
            StatScheme::StudentizedAl => "studentized_al",
            StatScheme::StudentizedSb => "studentized_sb",
        }
    }

    pub fn is_standardized(self) -> bool {
        matches!(self, StatScheme::StandardizedSigma | StatScheme::StandardizedOmega)
    }

    pub fn expansion_scheme(self) -> Scheme {
        match self {
            StatScheme::StandardizedSigma | StatScheme::StandardizedOmega => Scheme::Standardized,
            StatScheme::StudentizedAl => Scheme::StudentizedAl,
            StatScheme::StudentizedSb => Scheme::StudentizedSb,
        }
    }
}

impl fmt::Display for StatScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for StatScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StatScheme::ALL.into_iter().find(|k| k.label() == s.trim()).ok_or_else(|| {
            let names: Vec<_> = StatScheme::ALL.iter().map(|k| k.label()).collect();
            Error::Config(format!("unknown scheme '{}', expected one of {}", s.trim(), names.join(", ")))
        })
    }
}

/// Bandwidth as a fixed number or as c·n^(−γ).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BandwidthRule {
    Fixed(f64),
    Power { c: f64, gamma: f64 },
}

impl BandwidthRule {
    pub fn resolve(&self, n: usize) -> f64 {
        match *self {
            BandwidthRule::Fixed(h) => h,
            BandwidthRule::Power { c, gamma } => c * (n as f64).powf(-gamma),
        }
    }
}

impl fmt::Display for BandwidthRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            BandwidthRule::Fixed(h) => write!(f, "{h}"),
            BandwidthRule::Power { c, gamma } => write!(f, "{c}*n^-{gamma}"),
        }
    }
}

impl FromStr for BandwidthRule {
    type Err = Error;

    /// Accepts `0.12`, `n^-0.3`, `1.5*n^-0.3` (spaces and parentheses ignored).
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bandwidth '{s}' is neither a number nor of the form c*n^-gamma"));
        let t: String = s.chars().filter(|c| !c.is_whitespace() && *c != '(' && *c != ')').collect();
        if let Ok(h) = t.parse::<f64>() {
            return Ok(BandwidthRule::Fixed(h));
        }
        let (c, rest) = match t.split_once('*') {
            Some((c, rest)) => (c.parse::<f64>().map_err(|_| bad())?, rest),
            None => (1.0, t.as_str()),
        };
        let exponent = rest.strip_prefix("n^").ok_or_else(bad)?;
        let e: f64 = exponent.parse().map_err(|_| bad())?;
        Ok(BandwidthRule::Power { c, gamma: -e })
    }
}

/// Evaluation grid for empirical and approximating CDFs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CdfGrid {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl CdfGrid {
    pub fn values(&self) -> Vec<f64> {
        if self.points == 1 {
            return vec![self.lo];
        }
        let step = (self.hi - self.lo) / (self.points - 1) as f64;
        (0..self.points).map(|i| self.lo + step * i as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dgp: String,
    pub noise_scale: f64,
    pub dim: usize,
    pub order: u32,
    pub n: usize,
    pub bandwidth: BandwidthRule,
    pub direction: Vec<f64>,
    pub alphas: Vec<f64>,
    pub replications: usize,
    pub seed: Option<u64>,
    pub schemes: Vec<StatScheme>,
    pub grid: CdfGrid,
    /// Outer replications of the bootstrap diagnostic; 0 skips it.
    pub bootstrap_outer: usize,
    pub bootstrap_draws: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dgp: "linear".into(),
            noise_scale: 1.0,
            dim: 1,
            order: 2,
            n: 1000,
            bandwidth: BandwidthRule::Power { c: 1.0, gamma: 0.3 },
            direction: vec![1.0],
            alphas: vec![0.05],
            replications: 1000,
            seed: None,
            schemes: StatScheme::ALL.to_vec(),
            grid: CdfGrid { lo: -4.0, hi: 4.0, points: 161 },
            bootstrap_outer: 0,
            bootstrap_draws: 200,
        }
    }
}

/// Minimum replication count for the distributional comparisons to mean much.
pub const MIN_DISTRIBUTIONAL_REPLICATIONS: usize = 1000;
/// Fraction of SB-degenerate replications above which a run is unreliable.
pub const SB_DEGENERATE_LIMIT: f64 = 0.01;

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|t| t.trim())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<T>().map_err(|_| Error::Config(format!("{key}: cannot parse '{t}'"))))
        .collect()
}

fn parse_one<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse::<T>().map_err(|_| Error::Config(format!("{key}: cannot parse '{}'", value.trim())))
}

/// Sample sizes of the default experiment grid.
pub const DEFAULT_SIZES: [usize; 3] = [500, 1000, 2000];
/// Bandwidth exponents of the default grid, h = n^-γ.
pub const DEFAULT_GAMMAS: [f64; 4] = [0.25, 0.30, 0.40, 0.50];

/// Parsed fields plus the raw `n` / `bandwidth` lists when the caller allows lists.
struct Parsed {
    cfg: ExperimentConfig,
    sizes: Option<Vec<usize>>,
    bandwidths: Option<Vec<BandwidthRule>>,
}

fn parse_fields(text: &str, lists: bool) -> Result<Parsed> {
    let mut cfg = ExperimentConfig::default();
    let (mut sizes, mut bandwidths) = (None, None);
    let mut seen = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value', got '{line}'", lineno + 1)))?;
        let key = key.trim();
        if seen.insert(key.to_string(), lineno + 1).is_some() {
            return Err(Error::Config(format!("line {}: key '{key}' given twice", lineno + 1)));
        }
        match key {
            "dgp" => cfg.dgp = value.trim().to_string(),
            "noise" => cfg.noise_scale = parse_one(key, value)?,
            "dim" => cfg.dim = parse_one(key, value)?,
            "order" => cfg.order = parse_one(key, value)?,
            "n" if lists => sizes = Some(parse_list(key, value)?),
            "n" => cfg.n = parse_one(key, value)?,
            "bandwidth" if lists => bandwidths = Some(parse_list(key, value)?),
            "bandwidth" => cfg.bandwidth = value.parse()?,
            "direction" => cfg.direction = parse_list(key, value)?,
            "alphas" => cfg.alphas = parse_list(key, value)?,
            "replications" => cfg.replications = parse_one(key, value)?,
            "seed" => cfg.seed = Some(parse_one(key, value)?),
            "schemes" => cfg.schemes = parse_list(key, value)?,
            "grid" => {
                let g: Vec<f64> = parse_list(key, value)?;
                if g.len() != 3 || g[2].fract() != 0.0 || g[2] < 1.0 {
                    return Err(Error::Config("grid: expected 'lo, hi, points'".into()));
                }
                cfg.grid = CdfGrid { lo: g[0], hi: g[1], points: g[2] as usize };
            }
            "bootstrap_outer" => cfg.bootstrap_outer = parse_one(key, value)?,
            "bootstrap_draws" => cfg.bootstrap_draws = parse_one(key, value)?,
            _ => return Err(Error::Config(format!("line {}: unknown key '{key}'", lineno + 1))),
        }
    }
    if !seen.contains_key("direction") {
        cfg.direction = vec![1.0; cfg.dim];
    }
    Ok(Parsed { cfg, sizes, bandwidths })
}

impl ExperimentConfig {
    /// Parses a flat `key = value` file. `#` starts a comment; unknown or
    /// repeated keys are errors. Unlisted keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg = parse_fields(text, false)?.cfg;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if !dgp::PRESETS.contains(&self.dgp.as_str()) {
            return err(format!("unknown dgp '{}', expected one of {}", self.dgp, dgp::PRESETS.join(", ")));
        }
        if !(self.noise_scale > 0.0 && self.noise_scale.is_finite()) {
            return err(format!("noise must be positive, got {}", self.noise_scale));
        }
        if self.dim == 0 {
            return err("dim must be at least 1".into());
        }
        if self.n < 3 {
            return err(format!("n must be at least 3, got {}", self.n));
        }
        let h = self.h();
        if !(h > 0.0 && h.is_finite()) {
            return err(format!("bandwidth {} gives h = {h} at n = {}", self.bandwidth, self.n));
        }
        if self.direction.len() != self.dim {
            return err(format!("direction has {} entries, expected {}", self.direction.len(), self.dim));
        }
        if self.direction.iter().any(|v| !v.is_finite()) || self.direction.iter().all(|&v| v == 0.0) {
            return err("direction must be finite and non-zero".into());
        }
        if self.alphas.is_empty() || self.alphas.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            return err(format!("alphas must be non-empty and lie in (0, 1), got {:?}", self.alphas));
        }
        if self.replications == 0 {
            return err("replications must be at least 1".into());
        }
        if self.schemes.is_empty() {
            return err("schemes must name at least one statistic".into());
        }
        if !(self.grid.lo < self.grid.hi) || !self.grid.lo.is_finite() || !self.grid.hi.is_finite() {
            return err("grid: need finite lo < hi".into());
        }
        if self.bootstrap_outer > 0 && self.bootstrap_draws < 2 {
            return err("bootstrap_draws must be at least 2".into());
        }
        Ok(())
    }

    pub fn h(&self) -> f64 {
        self.bandwidth.resolve(self.n)
    }

    /// Copy with the given statistics only, in canonical order.
    fn restricted(&self, keep: impl Fn(StatScheme) -> bool) -> Vec<StatScheme> {
        let mut s: Vec<_> = self.schemes.iter().copied().filter(|k| keep(*k)).collect();
        s.sort();
        s.dedup();
        s
    }
}

/// One configuration swept over sample sizes and bandwidth rules.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentPlan {
    /// Everything except `n` and `bandwidth`, which come from the lists below.
    pub base: ExperimentConfig,
    pub sizes: Vec<usize>,
    pub bandwidths: Vec<BandwidthRule>,
}

impl ExperimentPlan {
    /// Same format as [`ExperimentConfig::parse`], but `n` and `bandwidth`
    /// take comma-separated lists. Either one left out falls back to
    /// [`DEFAULT_SIZES`] / [`DEFAULT_GAMMAS`].
    pub fn parse(text: &str) -> Result<Self> {
        let p = parse_fields(text, true)?;
        let sizes = p.sizes.unwrap_or_else(|| DEFAULT_SIZES.to_vec());
        let bandwidths = p
            .bandwidths
            .unwrap_or_else(|| DEFAULT_GAMMAS.iter().map(|&gamma| BandwidthRule::Power { c: 1.0, gamma }).collect());
        if sizes.is_empty() || bandwidths.is_empty() {
            return Err(Error::Config("n and bandwidth need at least one entry each".into()));
        }
        let plan = Self { base: p.cfg, sizes, bandwidths };
        for c in plan.cells() {
            c.validate()?;
        }
        Ok(plan)
    }

    /// Cells in file order, sample size outermost.
    pub fn cells(&self) -> Vec<ExperimentConfig> {
        let mut out = Vec::with_capacity(self.sizes.len() * self.bandwidths.len());
        for &n in &self.sizes {
            for b in &self.bandwidths {
                out.push(ExperimentConfig { n, bandwidth: *b, ..self.base.clone() });
            }
        }
        out
    }
}

/// Everything one cell of a plan produces.
#[derive(Debug, Clone)]
pub struct CellRun {
    pub experiment: Experiment,
    pub result: ExperimentResult,
    pub bootstrap: Option<BootstrapReport>,
}

/// Runs every cell of `plan`. Population constants do not depend on n or h,
/// so they are computed once. Each cell starts from the plan seed.
pub fn run_plan(plan: &ExperimentPlan) -> Result<Vec<CellRun>> {
    let cells = plan.cells();
    let first = Experiment::prepare(cells[0].clone())?;
    let functionals = first.functionals.clone();
    let mut out = Vec::with_capacity(cells.len());
    for (i, cfg) in cells.into_iter().enumerate() {
        let experiment = if i == 0 { first.clone() } else { Experiment::with_functionals(cfg, functionals.clone())? };
        let result = run(&experiment)?;
        let bootstrap = match experiment.config.bootstrap_outer {
            0 => None,
            outer => Some(bootstrap_diagnostic(&experiment, outer, experiment.config.bootstrap_draws)?),
        };
        out.push(CellRun { experiment, result, bootstrap });
    }
    Ok(out)
}

/// A configuration bound to its DGP, kernel and population constants.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub dgp: DgpSpec,
    pub kernel: Kernel,
    pub functionals: PopulationFunctionals,
    pub h: f64,
}

impl Experiment {
    /// Builds the DGP and kernel and computes the population constants.
    pub fn prepare(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let dgp = DgpSpec::preset(&config.dgp, config.dim, config.noise_scale)?;
        let kernel = Kernel::higher_order(config.dim, config.order)?;
        let functionals = dgp::population_functionals(&dgp, &kernel, &config.direction)?;
        Self::with_functionals(config, functionals)
    }

    /// Reuses population constants computed elsewhere.
    pub fn with_functionals(config: ExperimentConfig, functionals: PopulationFunctionals) -> Result<Self> {
        config.validate()?;
        if functionals.dim != config.dim
            || functionals.order != config.order
            || functionals.direction != config.direction
        {
            return Err(Error::Config(format!(
                "population constants are for d={}, P={}, v={:?}; the experiment needs d={}, P={}, v={:?}",
                functionals.dim, functionals.order, functionals.direction, config.dim, config.order, config.direction
            )));
        }
        let dgp = DgpSpec::preset(&config.dgp, config.dim, config.noise_scale)?;
        let kernel = Kernel::higher_order(config.dim, config.order)?;
        let h = config.h();
        Ok(Self { config, dgp, kernel, functionals, h })
    }

    fn seed(&self) -> Result<u64> {
        self.config.seed.ok_or_else(|| Error::Config("experiment has no seed".into()))
    }

    pub fn omega_v2(&self) -> f64 {
        self.functionals.omega_v2(self.config.n, self.h)
    }

    /// ω̃_v²/ϑ_v² for the scheme's standardization (one for the studentized ones).
    pub fn vartheta_ratio(&self, scheme: StatScheme) -> f64 {
        match scheme {
            StatScheme::StandardizedSigma => self.omega_v2() * self.config.n as f64 / self.functionals.sigma_v2,
            _ => 1.0,
        }
    }

    pub fn expansion_inputs(&self, scheme: StatScheme) -> DwadExpansionInputs {
        self.functionals.expansion_inputs(self.config.n, self.h, self.vartheta_ratio(scheme))
    }

    pub fn expansion(&self, scheme: StatScheme, x: f64) -> f64 {
        edgeworth::expansion(scheme.expansion_scheme(), &self.expansion_inputs(scheme), x)
    }

    /// Data stream of replication r.
    pub fn stream(&self, r: usize) -> Result<RandomStream> {
        Ok(RandomStream::new(self.seed()?, r as u64, StreamRole::Data))
    }

    pub fn sample(&self, r: usize) -> Result<Sample> {
        dgp::sample(&self.dgp, self.config.n, self.stream(r)?)
    }
}

/// What one replication contributes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Replication {
    pub theta_v: f64,
    /// v′V̂_ALv, NaN when the full fit was not computed.
    pub q_al: f64,
    /// v′V̂_SBv, NaN when the full fit was not computed.
    pub q_sb: f64,
}

impl Replication {
    pub fn sb_degenerate(&self) -> bool {
        !(self.q_sb > 0.0)
    }

    /// The scheme's statistic, or None if its studentizer is not positive.
    pub fn statistic(&self, exp: &Experiment, scheme: StatScheme) -> Option<f64> {
        let num = self.theta_v - exp.functionals.theta_v;
        let denom_sq = match scheme {
            StatScheme::StandardizedSigma => exp.functionals.sigma_v2 / exp.config.n as f64,
            StatScheme::StandardizedOmega => exp.omega_v2(),
            StatScheme::StudentizedAl => self.q_al,
            StatScheme::StudentizedSb => self.q_sb,
        };
        (denom_sq > 0.0).then(|| num / denom_sq.sqrt())
    }
}

/// Computes replication r; `full` requests the variance estimators too.
pub fn replicate(exp: &Experiment, r: usize, full: bool) -> Result<Replication> {
    let sample = exp.sample(r)?;
    let v = &exp.config.direction;
    if full {
        let fit = dwad::estimate_with(&sample, &exp.kernel, exp.h, Execution::Sequential)?;
        let theta_v = v.iter().zip(fit.theta_hat.iter()).map(|(a, b)| a * b).sum();
        Ok(Replication {
            theta_v,
            q_al: dwad::quadratic_form(fit.variance(VarianceKind::Al), v),
            q_sb: dwad::quadratic_form(fit.variance(VarianceKind::Sb), v),
        })
    } else {
        let t = dwad::theta_hat(&sample, &exp.kernel, exp.h)?;
        let theta_v = v.iter().zip(t.iter()).map(|(a, b)| a * b).sum();
        Ok(Replication { theta_v, q_al: f64::NAN, q_sb: f64::NAN })
    }
}

/// All replications, computed in parallel and returned in replication order.
pub fn replications(exp: &Experiment, full: bool) -> Result<Vec<Replication>> {
    exp.seed()?;
    par::map_indexed(exp.config.replications, Execution::Parallel, |r| replicate(exp, r, full))
        .into_iter()
        .collect()
}

/// Right-continuous empirical CDF of sorted data at x.
pub fn ecdf(sorted: &[f64], x: f64) -> f64 {
    sorted.partition_point(|&t| t <= x) as f64 / sorted.len() as f64
}

/// sup_x |F_m(x) − F(x)| for the empirical CDF of sorted data and a
/// continuous F, evaluated exactly at the jumps.
pub fn kolmogorov<F: Fn(f64) -> f64>(sorted: &[f64], cdf: F) -> f64 {
    let m = sorted.len() as f64;
    let mut d = 0.0_f64;
    let mut i = 0;
    while i < sorted.len() {
        // Ties form one jump.
        let mut j = i + 1;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        let f = cdf(sorted[i]);
        d = d.max((j as f64 / m - f).abs()).max((f - i as f64 / m).abs());
        i = j;
    }
    d
}

/// DKW 95% band half-width for an m-point empirical CDF.
pub fn dkw_floor(m: usize) -> f64 {
    ((2.0_f64 / 0.05).ln() / (2.0 * m as f64)).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageRow {
    pub alpha: f64,
    pub empirical: f64,
    /// Binomial standard error √(p(1−p)/m) at the empirical p.
    pub se: f64,
    pub predicted: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchemeResult {
    pub scheme: StatScheme,
    pub vartheta_ratio: f64,
    /// Order statistics of the replications that produced the statistic.
    pub sorted: Vec<f64>,
    pub excluded: usize,
    pub ks_to_phi: f64,
    pub ks_to_expansion: f64,
    pub coverage: Vec<CoverageRow>,
}

impl SchemeResult {
    pub fn used(&self) -> usize {
        self.sorted.len()
    }

    pub fn ecdf(&self, x: f64) -> f64 {
        ecdf(&self.sorted, x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub n: usize,
    pub h: f64,
    pub dim: usize,
    pub order: u32,
    pub replications: usize,
    pub schemes: Vec<SchemeResult>,
    pub sb_degenerate: usize,
    pub grid: Vec<f64>,
    /// ω̃_v² at (n, h)
    pub omega_v2: f64,
}

impl ExperimentResult {
    pub fn scheme(&self, s: StatScheme) -> Option<&SchemeResult> {
        self.schemes.iter().find(|r| r.scheme == s)
    }

    /// Share of replications whose v′V̂_SBv was not positive, if SB was run.
    pub fn sb_degenerate_fraction(&self) -> f64 {
        self.sb_degenerate as f64 / self.replications as f64
    }

    pub fn unreliable(&self) -> bool {
        self.scheme(StatScheme::StudentizedSb).is_some() && self.sb_degenerate_fraction() > SB_DEGENERATE_LIMIT
    }

    /// n h^{2P}; small values are needed for the expansions to apply.
    pub fn n_h_2p(&self) -> f64 {
        self.n as f64 * self.h.powi(2 * self.order as i32)
    }

    /// n h^{d+2}; large values put the run in the asymptotically linear regime.
    pub fn n_h_d2(&self) -> f64 {
        self.n as f64 * self.h.powi(self.dim as i32 + 2)
    }

    pub fn r_n(&self) -> f64 {
        edgeworth::rn(self.n, self.h, self.order, self.dim)
    }
}

fn summarize(exp: &Experiment, reps: &[Replication], schemes: &[StatScheme]) -> Result<ExperimentResult> {
    let cfg = &exp.config;
    let mut out = Vec::with_capacity(schemes.len());
    for &scheme in schemes {
        let mut sorted: Vec<f64> = reps.iter().filter_map(|r| r.statistic(exp, scheme)).collect();
        let excluded = reps.len() - sorted.len();
        sorted.sort_by(f64::total_cmp);
        let inputs = exp.expansion_inputs(scheme);
        inputs.validate()?;
        let (ks_to_phi, ks_to_expansion) = if sorted.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            (kolmogorov(&sorted, normal::cdf), kolmogorov(&sorted, |x| exp.expansion(scheme, x)))
        };
        let mut alphas = cfg.alphas.clone();
        alphas.sort_by(f64::total_cmp);
        alphas.dedup();
        let mut coverage = Vec::with_capacity(alphas.len());
        for alpha in alphas {
            let c = normal::two_sided_critical(alpha);
            let hits = sorted.iter().filter(|t| t.abs() <= c).count();
            let m = sorted.len() as f64;
            let p = hits as f64 / m;
            coverage.push(CoverageRow {
                alpha,
                empirical: p,
                se: (p * (1.0 - p) / m).sqrt(),
                predicted: edgeworth::coverage_prediction(&inputs, alpha, scheme.expansion_scheme())?,
            });
        }
        out.push(SchemeResult {
            scheme,
            vartheta_ratio: exp.vartheta_ratio(scheme),
            sorted,
            excluded,
            ks_to_phi,
            ks_to_expansion,
            coverage,
        });
    }
    let sb_degenerate = if schemes.iter().any(|s| !s.is_standardized()) {
        reps.iter().filter(|r| r.sb_degenerate()).count()
    } else {
        0
    };
    Ok(ExperimentResult {
        n: cfg.n,
        h: exp.h,
        dim: cfg.dim,
        order: cfg.order,
        replications: reps.len(),
        schemes: out,
        sb_degenerate,
        grid: cfg.grid.values(),
        omega_v2: exp.omega_v2(),
    })
}

fn run_schemes(exp: &Experiment, schemes: Vec<StatScheme>, what: &str) -> Result<ExperimentResult> {
    if schemes.is_empty() {
        return Err(Error::Config(format!("configuration lists no {what} scheme")));
    }
    let full = schemes.iter().any(|s| !s.is_standardized());
    let reps = replications(exp, full)?;
    summarize(exp, &reps, &schemes)
}

/// Standardized statistics only; needs just θ̂ per replication.
pub fn run_standardized(exp: &Experiment) -> Result<ExperimentResult> {
    run_schemes(exp, exp.config.restricted(StatScheme::is_standardized), "standardized")
}

/// Studentized statistics, with SB-degenerate replications excluded and counted.
pub fn run_studentized(exp: &Experiment) -> Result<ExperimentResult> {
    run_schemes(exp, exp.config.restricted(|s| !s.is_standardized()), "studentized")
}

/// Every configured scheme from a single pass over the replications.
pub fn run(exp: &Experiment) -> Result<ExperimentResult> {
    run_schemes(exp, exp.config.restricted(|_| true), "")
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub scheme: StatScheme,
    pub alpha: f64,
    pub n: usize,
    pub h: f64,
    pub ks_to_phi: f64,
    pub ks_to_expansion: f64,
    pub coverage_emp: f64,
    pub coverage_se: f64,
    pub coverage_pred: f64,
    pub r_n: f64,
}

/// One row per (scheme, alpha), sorted by scheme label then alpha.
pub fn edgeworth_comparison_table(result: &ExperimentResult) -> Vec<ComparisonRow> {
    let mut rows = Vec::new();
    for s in &result.schemes {
        for c in &s.coverage {
            rows.push(ComparisonRow {
                scheme: s.scheme,
                alpha: c.alpha,
                n: result.n,
                h: result.h,
                ks_to_phi: s.ks_to_phi,
                ks_to_expansion: s.ks_to_expansion,
                coverage_emp: c.empirical,
                coverage_se: c.se,
                coverage_pred: c.predicted,
                r_n: result.r_n(),
            });
        }
    }
    rows.sort_by(|a, b| a.scheme.label().cmp(b.scheme.label()).then(a.alpha.total_cmp(&b.alpha)));
    rows
}

/// 17 significant digits, enough to round-trip any f64.
pub fn fmt_num(x: f64) -> String {
    format!("{x:.16e}")
}

fn csv_string(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(|e| Error::Numerical(e.to_string()))?;
    for r in rows {
        w.write_record(&r).map_err(|e| Error::Numerical(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Numerical(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> Result<String> {
    csv_string(
        &[
            "scheme",
            "alpha",
            "n",
            "h",
            "KS_to_Phi",
            "KS_to_expansion",
            "coverage_emp",
            "coverage_se",
            "coverage_pred",
            "r_n",
        ],
        rows.iter().map(|r| {
            vec![
                r.scheme.label().to_string(),
                fmt_num(r.alpha),
                r.n.to_string(),
                fmt_num(r.h),
                fmt_num(r.ks_to_phi),
                fmt_num(r.ks_to_expansion),
                fmt_num(r.coverage_emp),
                fmt_num(r.coverage_se),
                fmt_num(r.coverage_pred),
                fmt_num(r.r_n),
            ]
        }),
    )
}

/// Empirical CDF, Φ and the matching expansion on each cell's grid.
pub fn cdf_grid_csv(runs: &[CellRun]) -> Result<String> {
    let mut rows = Vec::new();
    for run in runs {
        let (exp, result) = (&run.experiment, &run.result);
        for s in &result.schemes {
            for &x in &result.grid {
                rows.push(vec![
                    s.scheme.label().to_string(),
                    result.n.to_string(),
                    fmt_num(result.h),
                    fmt_num(x),
                    fmt_num(s.ecdf(x)),
                    fmt_num(normal::cdf(x)),
                    fmt_num(exp.expansion(s.scheme, x)),
                ]);
            }
        }
    }
    csv_string(&["scheme", "n", "h", "x", "ecdf", "Phi", "expansion"], rows)
}

/// Comparison rows of every cell, cell by cell.
pub fn plan_comparison_table(runs: &[CellRun]) -> Vec<ComparisonRow> {
    runs.iter().flat_map(|r| edgeworth_comparison_table(&r.result)).collect()
}

/// Per-cell key/value diagnostics: regime indicators, constants, exclusion
/// counts and, if present, the bootstrap ratios. `cell` indexes the plan.
pub fn diagnostics_csv(runs: &[CellRun]) -> Result<String> {
    let mut rows = Vec::new();
    for (i, run) in runs.iter().enumerate() {
        for (k, v) in cell_diagnostics(run) {
            rows.push(vec![i.to_string(), k, v]);
        }
    }
    csv_string(&["cell", "key", "value"], rows)
}

fn cell_diagnostics(run: &CellRun) -> Vec<(String, String)> {
    let (exp, result, boot) = (&run.experiment, &run.result, run.bootstrap.as_ref());
    let pf = &exp.functionals;
    let k2 = &pf.diagnostics.kappa2;
    let mut kv: Vec<(String, String)> = vec![
        ("dgp".into(), exp.config.dgp.clone()),
        ("dim".into(), result.dim.to_string()),
        ("order".into(), result.order.to_string()),
        ("n".into(), result.n.to_string()),
        ("h".into(), fmt_num(result.h)),
        ("bandwidth_rule".into(), exp.config.bandwidth.to_string()),
        ("n_h_2P".into(), fmt_num(result.n_h_2p())),
        ("n_h_d2".into(), fmt_num(result.n_h_d2())),
        ("r_n".into(), fmt_num(result.r_n())),
        ("replications".into(), result.replications.to_string()),
        (
            "distributional_comparisons_reliable".into(),
            (result.replications >= MIN_DISTRIBUTIONAL_REPLICATIONS).to_string(),
        ),
        ("dkw_floor".into(), fmt_num(dkw_floor(result.replications))),
        ("sb_degenerate".into(), result.sb_degenerate.to_string()),
        ("sb_degenerate_fraction".into(), fmt_num(result.sb_degenerate_fraction())),
        ("unreliable".into(), result.unreliable().to_string()),
        ("theta_v".into(), fmt_num(pf.theta_v)),
        ("sigma_v2".into(), fmt_num(pf.sigma_v2)),
        ("delta_v2".into(), fmt_num(pf.delta_v2)),
        ("beta_v".into(), fmt_num(pf.beta_v)),
        ("kappa1_v".into(), fmt_num(pf.kappa1_v)),
        ("kappa2_v".into(), fmt_num(pf.kappa2_v)),
        ("omega_v2".into(), fmt_num(result.omega_v2)),
        ("kappa2_stability".into(), fmt_num(k2.stability)),
    ];
    for s in &result.schemes {
        kv.push((format!("{}_used", s.scheme), s.used().to_string()));
        kv.push((format!("{}_vartheta_ratio", s.scheme), fmt_num(s.vartheta_ratio)));
    }
    if let Some(b) = boot {
        kv.extend([
            ("bootstrap_outer".into(), b.outer.to_string()),
            ("bootstrap_draws".into(), b.draws.to_string()),
            ("bootstrap_q_ratio".into(), fmt_num(b.q_ratio)),
            ("bootstrap_q_ratio_se".into(), fmt_num(b.q_ratio_se)),
            ("bootstrap_q_ratio_across".into(), fmt_num(b.q_ratio_across)),
            ("bootstrap_sigma_factor".into(), fmt_num(b.sigma_factor)),
            ("bootstrap_sigma_factor_se".into(), fmt_num(b.sigma_factor_se)),
            ("bootstrap_degenerate".into(), b.degenerate.to_string()),
            ("bootstrap_unstable".into(), b.unstable.to_string()),
        ]);
    }
    kv
}

/// Outcome of one outer replication of the bootstrap diagnostic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BootstrapOuter {
    /// Q̄ = θ̂_v − E[v′U] − L̄_h on the original sample.
    pub q_bar: f64,
    /// C(n,2)⁻¹ times the pairwise mean of q_ij², an estimate of V[Q̄].
    pub v_q: f64,
    /// Bootstrap variance of Q̄*.
    pub v_q_star: f64,
    /// v′Σ̂v on the original sample.
    pub sigma_hat: f64,
    /// Bootstrap mean of v′Σ̂*v.
    pub sigma_star: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapReport {
    pub outer: usize,
    pub draws: usize,
    pub n: usize,
    pub h: f64,
    /// mean V*[Q̄*] / mean V̂[Q̄]
    pub q_ratio: f64,
    pub q_ratio_se: f64,
    /// mean V*[Q̄*] over the across-replication variance of Q̄.
    pub q_ratio_across: f64,
    /// (E*Σ̂*_v − σ²_{L,h}) / (Σ̂_v − σ²_{L,h}), outer means in both places.
    pub sigma_factor: f64,
    pub sigma_factor_se: f64,
    /// Quadratic variances vanish, so the ratios are undefined.
    pub degenerate: bool,
    /// A ratio's relative standard error exceeds [`BOOTSTRAP_MAX_REL_SE`].
    pub unstable: bool,
    pub per_outer: Vec<BootstrapOuter>,
}

pub const BOOTSTRAP_MAX_REL_SE: f64 = 0.2;

/// m_h(x, y) as a boxed closure.
pub type ConditionalMean<'a> = Box<dyn Fn(&[f64], f64) -> f64 + Sync + 'a>;

/// Population pieces of the Hoeffding decomposition along v at the working h.
pub struct Projection<'a> {
    /// E[v′U₁₂]
    pub mean: f64,
    /// V[L_h(Z)]
    pub linear_variance: f64,
    /// m_h(x, y) = E[v′U₁₂ | Z₁ = (x, y)]
    pub conditional_mean: ConditionalMean<'a>,
}

impl<'a> Projection<'a> {
    pub fn from_dgp(fb: &'a FiniteBandwidth<'a>) -> Result<Self> {
        Ok(Self {
            mean: fb.mean()?,
            linear_variance: fb.linear_variance()?,
            conditional_mean: Box::new(move |x, y| fb.conditional_mean(x, y)),
        })
    }
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let m = xs.len() as f64;
    let mean = xs.iter().copied().collect::<Compensated>().value() / m;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).collect::<Compensated>().value() / (m - 1.0);
    (mean, var)
}

/// Jackknife standard error of mean(a)/mean(b) over paired observations.
fn ratio_se(a: &[f64], b: &[f64]) -> f64 {
    let m = a.len();
    if m < 2 {
        return f64::NAN;
    }
    let sa: f64 = a.iter().sum();
    let sb: f64 = b.iter().sum();
    let loo: Vec<f64> = (0..m).map(|i| (sa - a[i]) / (sb - b[i])).collect();
    let (mean, _) = mean_var(&loo);
    let ss: f64 = loo.iter().map(|r| (r - mean) * (r - mean)).sum();
    ((m as f64 - 1.0) / m as f64 * ss).sqrt()
}

/// Bootstrap variance-ratio diagnostic on explicit samples.
///
/// For each sample, Q̄* is the bootstrap θ̂*_v minus the resampled mean of the
/// population linear term L_h, so V*[Q̄*] picks up the resampling noise of the
/// empirical projection as well as the bootstrap degenerate part.
pub fn bootstrap_ratios(
    samples: &[Sample],
    kernel: &Kernel,
    h: f64,
    v: &[f64],
    proj: &Projection<'_>,
    draws: usize,
    seed: u64,
) -> Result<BootstrapReport> {
    if samples.len() < 2 || draws < 2 {
        return Err(Error::Config("bootstrap diagnostic needs at least 2 samples and 2 draws".into()));
    }
    let n = samples[0].n();
    if samples.iter().any(|s| s.n() != n) {
        return Err(Error::Config("bootstrap samples must share one size".into()));
    }
    let d = kernel.dim();
    let npairs = dwad::pairs(n);
    let per_outer: Vec<BootstrapOuter> = par::map_indexed(samples.len(), Execution::Parallel, |r| {
        let s = &samples[r];
        let m: Vec<f64> = (0..n).map(|i| (proj.conditional_mean)(s.x_row(i), s.y()[i])).collect();
        let l: Vec<f64> = m.iter().map(|mi| 2.0 * (mi - proj.mean)).collect();
        let fit = dwad::estimate_with(s, kernel, h, Execution::Sequential)?;
        let theta_v: f64 = v.iter().zip(fit.theta_hat.iter()).map(|(a, b)| a * b).sum();
        let l_bar = crate::summation::sum(&l) / n as f64;

        // Pairwise q_ij along v.
        let scale = -h.powi(-(d as i32) - 1);
        let mut u = vec![0.0; d];
        let mut g = vec![0.0; d];
        let mut qq = Compensated::ZERO;
        for i in 0..n {
            for j in i + 1..n {
                for ((uk, a), b) in u.iter_mut().zip(s.x_row(i)).zip(s.x_row(j)) {
                    *uk = (a - b) / h;
                }
                kernel.grad(&u, &mut g);
                let vu: f64 = scale * (s.y()[i] - s.y()[j]) * v.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>();
                let q = vu - m[i] - m[j] + proj.mean;
                qq.add(q * q);
            }
        }

        let mut rng = RandomStream::new(seed, r as u64, StreamRole::Bootstrap).rng();
        let mut idx = vec![0usize; n];
        let mut q_star = Vec::with_capacity(draws);
        let mut sig_star = Compensated::ZERO;
        for _ in 0..draws {
            for t in idx.iter_mut() {
                *t = rng.random_range(0..n);
            }
            let bs = s.select(&idx)?;
            let bf = dwad::estimate_with(&bs, kernel, h, Execution::Sequential)?;
            let tv: f64 = v.iter().zip(bf.theta_hat.iter()).map(|(a, b)| a * b).sum();
            let lb = idx.iter().map(|&i| l[i]).collect::<Compensated>().value() / n as f64;
            q_star.push(tv - lb);
            sig_star.add(dwad::quadratic_form(&bf.sigma_hat, v));
        }
        let (_, v_q_star) = mean_var(&q_star);
        Ok(BootstrapOuter {
            q_bar: theta_v - proj.mean - l_bar,
            v_q: qq.value() / npairs / npairs,
            v_q_star,
            sigma_hat: dwad::quadratic_form(&fit.sigma_hat, v),
            sigma_star: sig_star.value() / draws as f64,
        })
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let pick = |f: fn(&BootstrapOuter) -> f64| per_outer.iter().map(f).collect::<Vec<_>>();
    let v_q = pick(|o| o.v_q);
    let v_q_star = pick(|o| o.v_q_star);
    let q_bar = pick(|o| o.q_bar);
    let sig_hat: Vec<f64> = pick(|o| o.sigma_hat).iter().map(|s| s - proj.linear_variance).collect();
    let sig_star: Vec<f64> = pick(|o| o.sigma_star).iter().map(|s| s - proj.linear_variance).collect();

    let (mean_vq, _) = mean_var(&v_q);
    let (mean_vq_star, _) = mean_var(&v_q_star);
    let (_, var_qbar) = mean_var(&q_bar);
    let degenerate = !(mean_vq > 0.0) || !(mean_vq_star > 0.0);
    let (q_ratio, q_ratio_se, q_ratio_across, sigma_factor, sigma_factor_se) = if degenerate {
        (f64::NAN, f64::NAN, f64::NAN, f64::NAN, f64::NAN)
    } else {
        let (ms, _) = mean_var(&sig_star);
        let (mh, _) = mean_var(&sig_hat);
        (
            mean_vq_star / mean_vq,
            ratio_se(&v_q_star, &v_q),
            mean_vq_star / var_qbar,
            ms / mh,
            ratio_se(&sig_star, &sig_hat),
        )
    };
    let unstable = degenerate
        || q_ratio_se / q_ratio.abs() > BOOTSTRAP_MAX_REL_SE
        || sigma_factor_se / sigma_factor.abs() > BOOTSTRAP_MAX_REL_SE;
    Ok(BootstrapReport {
        outer: samples.len(),
        draws,
        n,
        h,
        q_ratio,
        q_ratio_se,
        q_ratio_across,
        sigma_factor,
        sigma_factor_se,
        degenerate,
        unstable,
        per_outer,
    })
}

/// Bootstrap diagnostic for an experiment: `outer` data replications, each
/// resampled `draws` times.
pub fn bootstrap_diagnostic(exp: &Experiment, outer: usize, draws: usize) -> Result<BootstrapReport> {
    let samples = (0..outer).map(|r| exp.sample(r)).collect::<Result<Vec<_>>>()?;
    let fb = FiniteBandwidth::new(&exp.dgp, &exp.kernel, exp.h, &exp.config.direction)?;
    let proj = Projection::from_dgp(&fb)?;
    bootstrap_ratios(&samples, &exp.kernel, exp.h, &exp.config.direction, &proj, draws, exp.seed()?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasRow {
    pub h: f64,
    pub n: usize,
    pub replications: usize,
    /// Monte Carlo estimate of E[v′θ̂]
    pub mean: f64,
    pub se: f64,
    /// (mean − θ_v)/h^P
    pub scaled: f64,
    pub scaled_se: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasReport {
    pub rows: Vec<BiasRow>,
    /// Richardson tableau; level k removes the h^{2k} term. Last entry is the
    /// final extrapolant.
    pub tableau: Vec<Vec<f64>>,
    pub extrapolated: f64,
    /// Propagated standard error of the final extrapolant.
    pub extrapolated_se: f64,
    pub beta_v: f64,
    pub rel_error: f64,
}

/// Monte Carlo check that (E[θ̂_v] − θ_v)/h^P approaches β_v.
///
/// `plan` lists (h, n) with h halving at each step. Each replication records
/// v′θ̂ minus the sample mean of ψ_v, whose expectation is zero; this removes
/// the linear term from the Monte Carlo noise without changing the mean.
pub fn bias_constant_check(
    dgp: &DgpSpec,
    kernel: &Kernel,
    pf: &PopulationFunctionals,
    plan: &[(f64, usize)],
    replications: usize,
    seed: u64,
) -> Result<BiasReport> {
    if plan.is_empty() || replications < 2 {
        return Err(Error::Config("bias check needs a bandwidth plan and at least 2 replications".into()));
    }
    for w in plan.windows(2) {
        if (w[1].0 * 2.0 - w[0].0).abs() > 1e-12 * w[0].0 {
            return Err(Error::Config("bias check bandwidths must halve at each step".into()));
        }
    }
    let v = &pf.direction;
    let p = kernel.order() as i32;
    let mut rows = Vec::with_capacity(plan.len());
    for (level, &(h, n)) in plan.iter().enumerate() {
        let vals: Vec<f64> = par::map_indexed(replications, Execution::Parallel, |r| {
            let stream = RandomStream::new(seed, ((level as u64) << 40) | r as u64, StreamRole::Data);
            let s = dgp::sample(dgp, n, stream)?;
            let t = dwad::theta_hat(&s, kernel, h)?;
            let tv: f64 = v.iter().zip(t.iter()).map(|(a, b)| a * b).sum();
            let psi = (0..n)
                .map(|i| dgp::influence(dgp, v, pf.theta_v, s.x_row(i), s.y()[i]))
                .collect::<Compensated>()
                .value()
                / n as f64;
            Ok(tv - psi)
        })
        .into_iter()
        .collect::<Result<_>>()?;
        let (mean, var) = mean_var(&vals);
        let se = (var / replications as f64).sqrt();
        let hp = h.powi(p);
        rows.push(BiasRow { h, n, replications, mean, se, scaled: (mean - pf.theta_v) / hp, scaled_se: se / hp });
    }

    // Richardson on b(h) = β + c₁h² + c₂h⁴ + …, h halving. Weights are carried
    // along to propagate the (independent) Monte Carlo errors.
    let m = rows.len();
    let mut tableau = vec![rows.iter().map(|r| r.scaled).collect::<Vec<_>>()];
    let mut weights: Vec<Vec<f64>> = (0..m).map(|i| (0..m).map(|j| (i == j) as u8 as f64).collect()).collect();
    for k in 1..m {
        let f = 4f64.powi(k as i32);
        let prev = tableau.last().unwrap();
        let next: Vec<f64> = (0..prev.len() - 1).map(|i| (f * prev[i + 1] - prev[i]) / (f - 1.0)).collect();
        weights = (0..weights.len() - 1)
            .map(|i| (0..m).map(|j| (f * weights[i + 1][j] - weights[i][j]) / (f - 1.0)).collect())
            .collect();
        tableau.push(next);
    }
    let extrapolated = tableau.last().unwrap()[0];
    let extrapolated_se = weights[0]
        .iter()
        .zip(&rows)
        .map(|(w, r)| (w * r.scaled_se).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(BiasReport {
        rows,
        tableau,
        extrapolated,
        extrapolated_se,
        beta_v: pf.beta_v,
        rel_error: ((extrapolated - pf.beta_v) / pf.beta_v).abs(),
    })
}
