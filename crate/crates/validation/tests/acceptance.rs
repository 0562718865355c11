//! One test per acceptance criterion. Each prints a PASS/FAIL line to stderr
//! whether or not it passes, then asserts.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::fs;
use std::sync::OnceLock;
use std::time::Instant;

use common::{FourierCdf, max_rel, naive_fit, simpson};
use dwad_core::dgp::{self, DgpSpec};
use dwad_core::dwad;
use dwad_core::edgeworth::{generic_cdf, generic_gammas, BiasConvention, GenericUstatInputs};
use dwad_core::kernel::{roughness_matrix, SUPPORTED_ORDERS};
use dwad_core::par::{self, Execution};
use dwad_core::rng::{RandomStream, StreamRole};
use dwad_core::simlab::{self, BandwidthRule, Experiment, ExperimentConfig, ExperimentResult, StatScheme};
use dwad_core::{verify_moments, Kernel, Sample, VarianceKind};
use dwad_validation::{binomial_se, mean_se, report};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 20_240_611;

fn entries<M: std::ops::Index<(usize, usize), Output = f64>>(m: &M, d: usize) -> Vec<f64> {
    (0..d * d).map(|k| m[(k / d, k % d)]).collect()
}

#[test]
fn criterion_1_streaming_matches_naive() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst = 0.0_f64;
    for case in 0..50 {
        let d = 1 + case % 2;
        let order = if case % 4 == 3 { 4 } else { 2 };
        let n = rng.random_range(3..=200);
        let h = rng.random_range(0.2..1.5);
        let x: Vec<f64> = (0..n * d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let y: Vec<f64> = (0..n).map(|i| x[i * d] + rng.random_range(-1.0..1.0)).collect();
        let s = Sample::new(y.clone(), x.clone(), d).unwrap();
        let fit = dwad::estimate(&s, &Kernel::higher_order(d, order).unwrap(), h).unwrap();
        let rows: Vec<Vec<f64>> = x.chunks(d).map(|c| c.to_vec()).collect();
        let naive = naive_fit(&y, &rows, order, h);
        worst = worst
            .max(max_rel(fit.theta_hat.as_slice(), &naive.theta))
            .max(max_rel(&entries(&fit.sigma_hat, d), &naive.sigma))
            .max(max_rel(&entries(&fit.delta_hat, d), &naive.delta));
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst <= 1e-10 && secs < 10.0;
    let detail = format!("50 instances, worst relative error {worst:.2e} (limit 1e-10), {secs:.2} s (limit 10 s)");
    assert!(report(1, "oracle equivalence", pass, &detail));
}

#[test]
fn criterion_2_kernel_moments() {
    let start = Instant::now();
    let k = Kernel::higher_order(1, 4).unwrap();
    let moment = |p: i32| simpson(|u| u.powi(p) * k.eval(&[u]), -14.0, 14.0, 20_000);
    let (m0, m2, m4) = (moment(0), moment(2), moment(4));
    let report_ok = verify_moments(&k, 1e-8).unwrap().all_pass();
    let mut min_eig = f64::INFINITY;
    for d in 1..=3 {
        for order in SUPPORTED_ORDERS {
            let r = roughness_matrix(&Kernel::higher_order(d, order).unwrap()).unwrap();
            min_eig = min_eig.min(r.symmetric_eigenvalues().min());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = (m0 - 1.0).abs() < 1e-8
        && m2.abs() < 1e-8
        && (m4 + 3.0).abs() < 1e-6
        && report_ok
        && min_eig > 0.0
        && secs < 5.0;
    let detail = format!(
        "order 4: |int K - 1| = {:.1e}, |int u^2 K| = {:.1e}, mu_4 = {m4:.9}; library check {}; \
         smallest roughness eigenvalue over d = 1..3 = {min_eig:.3e}; {secs:.2} s",
        (m0 - 1.0).abs(),
        m2.abs(),
        if report_ok { "passes" } else { "fails" }
    );
    assert!(report(2, "kernel moments", pass, &detail));
}

#[test]
fn criterion_3_variance_estimator_bias() {
    let start = Instant::now();
    let n = 500;
    let h = (n as f64).powf(-0.4);
    let reps = 2000;
    let g = DgpSpec::linear(1, 1.0).unwrap();
    let k = Kernel::gaussian(1).unwrap();
    let pf = dgp::population_functionals(&g, &k, &[1.0]).unwrap();
    let out: Vec<[f64; 3]> = par::map_indexed(reps, Execution::Parallel, |r| {
        let s = dgp::sample(&g, n, RandomStream::new(SEED, r as u64, StreamRole::Data))
            .unwrap();
        let fit = dwad::estimate_with(&s, &k, h, Execution::Sequential).unwrap();
        [fit.variance(VarianceKind::Al)[(0, 0)], fit.variance(VarianceKind::Sb)[(0, 0)], fit.delta_hat[(0, 0)]]
    });
    let col = |j: usize| out.iter().map(|r| r[j]).collect::<Vec<_>>();
    let c2 = dwad::pairs(n);
    let al_target = pf.sigma_v2 / n as f64 + 2.0 * pf.delta_v2 / (c2 * h.powi(3));
    let sb_target = pf.omega_v2(n, h);
    let targets = [al_target, sb_target, pf.delta_v2];
    let names = ["V_AL", "V_SB", "Delta"];
    let mut pass = true;
    let mut parts = Vec::new();
    for j in 0..3 {
        let (m, se) = mean_se(&col(j));
        let z = (m - targets[j]) / se;
        pass &= z.abs() <= 3.0;
        parts.push(format!("{}: mean {m:.5e} vs {:.5e} ({z:+.2} SE)", names[j], targets[j]));
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < 900.0;
    let detail = format!("n = {n}, h = {h:.4}, R = {reps}; {}; {secs:.0} s", parts.join("; "));
    assert!(report(3, "variance-estimator bias", pass, &detail));
}

/// The n = 1000, h = n^-0.3, R = 20000 study shared by criteria 4 and 5.
fn coverage_study() -> &'static (Experiment, ExperimentResult, f64) {
    static STUDY: OnceLock<(Experiment, ExperimentResult, f64)> = OnceLock::new();
    STUDY.get_or_init(|| {
        let start = Instant::now();
        let cfg = ExperimentConfig {
            dgp: "linear".into(),
            dim: 1,
            order: 2,
            n: 1000,
            bandwidth: BandwidthRule::Power { c: 1.0, gamma: 0.3 },
            direction: vec![1.0],
            alphas: vec![0.05],
            replications: 20_000,
            seed: Some(SEED),
            ..ExperimentConfig::default()
        };
        let exp = Experiment::prepare(cfg).unwrap();
        let res = simlab::run(&exp).unwrap();
        (exp, res, start.elapsed().as_secs_f64())
    })
}

#[test]
fn criterion_4_coverage_ranking() {
    let (_, res, secs) = coverage_study();
    let al = &res.scheme(StatScheme::StudentizedAl).unwrap().coverage[0];
    let sb = &res.scheme(StatScheme::StudentizedSb).unwrap().coverage[0];
    let m = res.replications;
    let se = binomial_se(0.95, m);
    let checks = [
        ("AL > 0.95", al.empirical > 0.95),
        ("|SB - 0.95| < |AL - 0.95|", (sb.empirical - 0.95).abs() < (al.empirical - 0.95).abs()),
        ("AL within 3 SE of prediction", (al.empirical - al.predicted).abs() <= 3.0 * se),
        ("SB within 3 SE of 0.95", (sb.empirical - 0.95).abs() <= 3.0 * se),
        ("runtime < 45 min", *secs < 2700.0),
    ];
    let pass = checks.iter().all(|c| c.1);
    let detail = format!(
        "R = {m}, SB-degenerate {}; AL {:.4} (predicted {:.4}), SB {:.4}, 3 SE = {:.4}; {}; {secs:.0} s",
        res.sb_degenerate,
        al.empirical,
        al.predicted,
        sb.empirical,
        3.0 * se,
        checks.iter().map(|(n, ok)| format!("{n}: {}", if *ok { "ok" } else { "no" })).collect::<Vec<_>>().join(", ")
    );
    assert!(report(4, "coverage ranking", pass, &detail));
}

#[test]
fn criterion_5_standardized_expansion_fit() {
    let (_, res, _) = coverage_study();
    let s = res.scheme(StatScheme::StandardizedOmega).unwrap();
    let floor = simlab::dkw_floor(s.used());
    let gap = s.ks_to_phi - s.ks_to_expansion;
    let pass = s.ks_to_expansion < s.ks_to_phi && gap > 2.0 * floor;
    let detail = format!(
        "KS to Phi {:.4}, KS to G {:.4}, gap {gap:.4} vs twice the DKW floor {:.4}",
        s.ks_to_phi,
        s.ks_to_expansion,
        2.0 * floor
    );
    assert!(report(5, "standardized expansion fit", pass, &detail));
}

#[test]
fn criterion_6_generic_expansion() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut sup = 0.0_f64;
    let mut max_gamma = 0.0_f64;
    let mut gamma7_zero = true;
    for _ in 0..20 {
        let n = rng.random_range(100..5000);
        let sigma_ell2: f64 = rng.random_range(0.5..3.0);
        let inp = GenericUstatInputs {
            n,
            bias: rng.random_range(-0.05..0.05) * (sigma_ell2 / n as f64).sqrt(),
            scale: (sigma_ell2 / n as f64).sqrt(),
            sigma_ell2,
            sigma_q2: rng.random_range(0.0..3.0),
            kappa_a: rng.random_range(-2.0..2.0),
            kappa_b: rng.random_range(-1.0..1.0),
        };
        let g = generic_gammas(&inp).unwrap();
        gamma7_zero &= g.get(7) == 0.0;
        max_gamma = g.gamma.iter().fold(max_gamma, |m, v| m.max(v.abs()));
        let oracle = FourierCdf::new(&g.gamma);
        for i in 0..=200 {
            let x = -5.0 + 0.05 * i as f64;
            sup = sup.max((generic_cdf(&g, x, BiasConvention::Bracket) - oracle.cdf(x)).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = sup < 1e-6 && gamma7_zero && secs < 5.0;
    let detail = format!(
        "20 coefficient vectors (largest |gamma_j| {max_gamma:.2e}): sup error on [-5, 5] {sup:.2e} (limit 1e-6); \
         gamma_7 = 0 {}; {secs:.2} s",
        if gamma7_zero { "always" } else { "violated" }
    );
    assert!(report(6, "generic expansion", pass, &detail));
}

#[test]
fn criterion_7_bootstrap_ratio() {
    let start = Instant::now();
    let n = 500;
    let cfg = ExperimentConfig {
        n,
        bandwidth: BandwidthRule::Fixed((n as f64).powf(-1.0 / 3.0)),
        replications: 50,
        seed: Some(SEED),
        ..ExperimentConfig::default()
    };
    let exp = Experiment::prepare(cfg).unwrap();
    let b = simlab::bootstrap_diagnostic(&exp, 50, 200).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let pass = !b.degenerate
        && (2.5..=3.5).contains(&b.q_ratio)
        && (1.6..=2.4).contains(&b.sigma_factor)
        && secs < 1800.0;
    let detail = format!(
        "n = {n}, nh^3 = {:.3}, 50 x 200: variance ratio {:.3} +/- {:.3} (want [2.5, 3.5]), \
         Sigma factor {:.3} +/- {:.3} (want [1.6, 2.4]); {secs:.0} s",
        n as f64 * exp.h.powi(3),
        b.q_ratio,
        b.q_ratio_se,
        b.sigma_factor,
        b.sigma_factor_se
    );
    assert!(report(7, "bootstrap ratio", pass, &detail));
}

#[test]
fn criterion_8_thread_count_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sim.cfg");
    fs::write(
        &cfg,
        "dgp = linear\nn = 300\nbandwidth = n^-0.3\nreplications = 400\nalphas = 0.05, 0.1\n\
         bootstrap_outer = 6\nbootstrap_draws = 30\n",
    )
    .unwrap();
    let files = ["results.csv", "cdf_grid.csv", "diagnostics.csv"];
    let mut outputs = Vec::new();
    for threads in [1, 4, 8] {
        let out = dir.path().join(format!("t{threads}"));
        dwad_cli::run_from([
            "dwad",
            "simulate",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--seed",
            "7",
            "--threads",
            &threads.to_string(),
        ])
        .unwrap();
        outputs.push(files.map(|f| fs::read(out.join(f)).unwrap()));
    }
    let pass = outputs.iter().all(|o| *o == outputs[0]);
    let bytes: usize = outputs[0].iter().map(Vec::len).sum();
    let detail = format!("simulate with 1, 4 and 8 threads: {} ({bytes} bytes per run)", if pass {
        "outputs byte-identical"
    } else {
        "outputs differ"
    });
    assert!(report(8, "determinism", pass, &detail));
}

#[test]
fn criterion_9_bias_constant() {
    let start = Instant::now();
    let g = DgpSpec::linear(1, 1.0).unwrap();
    let k = Kernel::gaussian(1).unwrap();
    let pf = dgp::population_functionals(&g, &k, &[1.0]).unwrap();
    let plan = [(0.4, 200), (0.2, 500), (0.1, 2000)];
    let rep = simlab::bias_constant_check(&g, &k, &pf, &plan, 50_000, SEED).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let pass = rep.rel_error < 0.05;
    let rows: Vec<String> =
        rep.rows.iter().map(|r| format!("h={} n={}: {:.4} +/- {:.4}", r.h, r.n, r.scaled, r.scaled_se)).collect();
    let detail = format!(
        "(E[theta] - theta)/h^2 {}; extrapolated {:.4} +/- {:.4} vs beta {:.4}, relative error {:.2}% (limit 5%); {secs:.0} s",
        rows.join(", "),
        rep.extrapolated,
        rep.extrapolated_se,
        rep.beta_v,
        100.0 * rep.rel_error
    );
    assert!(report(9, "bias constant", pass, &detail));
}
