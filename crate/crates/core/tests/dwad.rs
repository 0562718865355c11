mod common;

use common::{max_rel, naive_fit, rel_err};
use dwad_core::dgp::{self, DgpSpec};
use dwad_core::dwad::{self, confidence_interval, pairs, t_statistic, variance_sb};
use dwad_core::par::Execution;
use dwad_core::rng::{RandomStream, StreamRole};
use dwad_core::{estimate, normal, Kernel, Sample, VarianceKind};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Covariates on a dyadic grid so that integer shifts are exact.
fn random_sample(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Sample {
    let x: Vec<f64> = (0..n * d).map(|_| (rng.random_range(-4.0..4.0) * 1024.0_f64).round() / 1024.0).collect();
    let y: Vec<f64> = (0..n).map(|i| x[i * d] + rng.random_range(-1.0..1.0)).collect();
    Sample::new(y, x, d).unwrap()
}

fn rows(s: &Sample) -> Vec<Vec<f64>> {
    (0..s.n()).map(|i| s.x_row(i).to_vec()).collect()
}

fn flat(m: &nalgebra::DMatrix<f64>) -> Vec<f64> {
    let d = m.nrows();
    (0..d * d).map(|k| m[(k / d, k % d)]).collect()
}

#[test]
fn streaming_fit_matches_naive_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..24 {
        let d = 1 + case % 2;
        let order = if case % 3 == 0 { 4 } else { 2 };
        let n = rng.random_range(3..=200);
        let h = rng.random_range(0.2..1.5);
        let s = random_sample(&mut rng, n, d);
        let k = Kernel::higher_order(d, order).unwrap();
        let fit = estimate(&s, &k, h).unwrap();
        let naive = naive_fit(s.y(), &rows(&s), order, h);
        assert!(max_rel(fit.theta_hat.as_slice(), &naive.theta) < 1e-10, "case {case}");
        assert!(max_rel(&flat(&fit.sigma_hat), &naive.sigma) < 1e-10, "case {case}");
        assert!(max_rel(&flat(&fit.delta_hat), &naive.delta) < 1e-10, "case {case}");
        for i in 0..n {
            let got: Vec<f64> = (0..d).map(|k| fit.u_row_means[(i, k)]).collect();
            assert!(max_rel(&got, &naive.row_means[i]) < 1e-9, "case {case} row {i}");
        }
    }
}

#[test]
fn three_point_example_matches_naive_formulas() {
    let s = Sample::new(vec![0.0, 1.0, 2.0], vec![0.0, 1.0, -1.0], 1).unwrap();
    let k = Kernel::gaussian(1).unwrap();
    let fit = estimate(&s, &k, 1.0).unwrap();
    let naive = naive_fit(s.y(), &rows(&s), 2, 1.0);
    assert!(rel_err(fit.theta_hat[0], naive.theta[0]) < 1e-10);
    let t = t_statistic(&fit, &[1.0], 0.0, VarianceKind::Al).unwrap();
    let t_naive = naive.theta[0] / (naive.sigma[0] / 3.0).sqrt();
    assert!(rel_err(t, t_naive) < 1e-12);
}

#[test]
fn theta_is_the_mean_of_row_means() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let s = random_sample(&mut rng, 150, 2);
    let fit = estimate(&s, &Kernel::gaussian(2).unwrap(), 0.7).unwrap();
    for k in 0..2 {
        let m = fit.u_row_means.column(k).mean();
        assert!(rel_err(m, fit.theta_hat[k]) < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn permutation_leaves_the_fit_unchanged(seed in any::<u64>(), n in 3usize..120, d in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_sample(&mut rng, n, d);
        let k = Kernel::gaussian(d).unwrap();
        let a = estimate(&s, &k, 0.5).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let b = estimate(&s.select(&perm).unwrap(), &k, 0.5).unwrap();
        prop_assert!(max_rel(b.theta_hat.as_slice(), a.theta_hat.as_slice()) <= 1e-12);
        prop_assert!(max_rel(&flat(&b.sigma_hat), &flat(&a.sigma_hat)) <= 1e-12);
        prop_assert!(max_rel(&flat(&b.delta_hat), &flat(&a.delta_hat)) <= 1e-12);
    }

    #[test]
    fn integer_shift_of_covariates_changes_nothing(seed in any::<u64>(), n in 3usize..80, shift in -3i32..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_sample(&mut rng, n, 2);
        let moved: Vec<f64> = s.x().iter().map(|x| x + shift as f64).collect();
        let t = Sample::new(s.y().to_vec(), moved, 2).unwrap();
        let k = Kernel::higher_order(2, 4).unwrap();
        let a = estimate(&s, &k, 0.8).unwrap();
        let b = estimate(&t, &k, 0.8).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn pair_kernel_is_symmetric_in_its_arguments(u in -5.0f64..5.0, w in -5.0f64..5.0, yi in -3.0f64..3.0, yj in -3.0f64..3.0) {
        // U_ij = −h^{−d−1}K̇(u_ij)(Y_i − Y_j) with u_ji = −u_ij.
        for order in [2, 4, 6] {
            let k = Kernel::higher_order(2, order).unwrap();
            let mut gij = [0.0; 2];
            let mut gji = [0.0; 2];
            k.grad(&[u, w], &mut gij);
            k.grad(&[-u, -w], &mut gji);
            for c in 0..2 {
                let uij = -gij[c] * (yi - yj);
                let uji = -gji[c] * (yj - yi);
                prop_assert!((uij - uji).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn variance_estimators_are_ordered(seed in any::<u64>(), n in 5usize..100, vx in -2.0f64..2.0, vy in -2.0f64..2.0) {
        prop_assume!(vx.abs() + vy.abs() > 1e-3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_sample(&mut rng, n, 2);
        let fit = estimate(&s, &Kernel::gaussian(2).unwrap(), 0.6).unwrap();
        let v = [vx, vy];
        let al = dwad::quadratic_form(&fit.v_al, &v);
        let sb = dwad::quadratic_form(&fit.v_sb, &v);
        prop_assert!(al >= sb);
        let eig_al = nalgebra::SymmetricEigen::new(fit.v_al.clone()).eigenvalues.min();
        let eig_delta = nalgebra::SymmetricEigen::new(fit.delta_hat.clone()).eigenvalues.min();
        let scale = fit.v_al.abs().max().max(1e-300);
        prop_assert!(eig_al >= -1e-12 * scale);
        prop_assert!(eig_delta >= -1e-12 * fit.delta_hat.abs().max().max(1e-300));
        prop_assert!(fit.sigma_hat == fit.sigma_hat.transpose());
        prop_assert!(fit.delta_hat == fit.delta_hat.transpose());
        // V̂_AL − V̂_SB = C(n,2)⁻¹h^{−d−2}Δ̂
        let gap = &fit.v_al - &fit.v_sb;
        let expect = &fit.delta_hat / (pairs(n) * 0.6f64.powi(4));
        prop_assert!(max_rel(&flat(&gap), &flat(&expect)) <= 1e-12);
    }

    #[test]
    fn t_statistic_is_scale_free_in_the_direction(seed in any::<u64>(), c in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_sample(&mut rng, 60, 2);
        let fit = estimate(&s, &Kernel::gaussian(2).unwrap(), 0.9).unwrap();
        let v = [0.3, -1.1];
        let cv = [0.3 * c, -1.1 * c];
        let theta0 = 0.05;
        let t1 = t_statistic(&fit, &v, theta0, VarianceKind::Al).unwrap();
        let t2 = t_statistic(&fit, &cv, theta0 * c, VarianceKind::Al).unwrap();
        prop_assert!(rel_err(t2, t1) < 1e-12);
        let centered = v[0] * fit.theta_hat[0] + v[1] * fit.theta_hat[1];
        prop_assert_eq!(t_statistic(&fit, &v, centered, VarianceKind::Al).unwrap(), 0.0);
    }
}

#[test]
fn constant_outcomes_give_zero_aggregates() {
    let s = Sample::new(vec![2.5; 40], (0..40).map(|i| (i as f64 * 0.37).sin()).collect(), 1).unwrap();
    let fit = estimate(&s, &Kernel::gaussian(1).unwrap(), 0.3).unwrap();
    assert_eq!(fit.theta_hat[0], 0.0);
    assert_eq!(fit.delta_hat[(0, 0)], 0.0);
    assert_eq!(dwad::variance_al(&fit)[(0, 0)], 0.0);
    let (sb, psd) = variance_sb(&fit);
    assert_eq!(sb[(0, 0)], 0.0);
    assert!(psd);
    let err = t_statistic(&fit, &[1.0], 0.0, VarianceKind::Sb).unwrap_err();
    assert!(matches!(err, dwad_core::Error::DegenerateVariance { .. }));
}

#[test]
fn intervals_nest_and_use_the_normal_quantile() {
    let g = DgpSpec::linear(1, 1.0).unwrap();
    let k = Kernel::gaussian(1).unwrap();
    let s = dgp::sample(&g, 400, RandomStream::new(17, 0, StreamRole::Data)).unwrap();
    let fit = estimate(&s, &k, 0.25).unwrap();
    let al = confidence_interval(&fit, &[1.0], 0.05, VarianceKind::Al).unwrap();
    let sb = confidence_interval(&fit, &[1.0], 0.05, VarianceKind::Sb).unwrap();
    assert!(al.lower() <= sb.lower() && sb.upper() <= al.upper());
    assert!(sb.half_width > 0.0);
    assert!((normal::two_sided_critical(0.05) - 1.959_963_985).abs() < 1e-8);
    let (_, se) = dwad::projected(&fit, &[1.0], VarianceKind::Al).unwrap();
    assert!(rel_err(al.half_width, 1.959_963_984_540_054 * se) < 1e-12);
    assert!(confidence_interval(&fit, &[1.0], 1.0, VarianceKind::Al).is_err());
}

#[test]
fn sequential_and_parallel_paths_agree_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let s = random_sample(&mut rng, 700, 2);
    let k = Kernel::higher_order(2, 4).unwrap();
    let a = dwad::estimate_with(&s, &k, 0.4, Execution::Sequential).unwrap();
    let b = dwad::estimate_with(&s, &k, 0.4, Execution::Parallel).unwrap();
    assert_eq!(a, b);
}

#[test]
fn estimate_concentrates_around_theta_on_the_linear_design() {
    let g = DgpSpec::linear(1, 1.0).unwrap();
    let k = Kernel::gaussian(1).unwrap();
    let pf = dgp::population_functionals(&g, &k, &[1.0]).unwrap();
    let n = 2000;
    let h = (n as f64).powf(-0.3);
    let band = 4.0 * pf.omega_v2(n, h).sqrt();
    let inside = (0..200)
        .filter(|&r| {
            let s = dgp::sample(&g, n, RandomStream::new(99, r, StreamRole::Data)).unwrap();
            let t = dwad::theta_hat(&s, &k, h).unwrap()[0];
            (t - pf.theta_v).abs() < band
        })
        .count();
    assert!(inside >= 190, "{inside} of 200 within 4 omega");
}
