//! Reporting helpers for the acceptance suite in `tests/acceptance.rs`.

use std::io::Write;

/// Writes one verdict line straight to stderr, past the test harness's
/// output capture, and returns `pass`.
pub fn report(id: u32, name: &str, pass: bool, detail: &str) -> bool {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let line = format!("criterion {id} [{name}]: {verdict} | {detail}\n");
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
    pass
}

/// Binomial standard error of a proportion.
pub fn binomial_se(p: f64, m: usize) -> f64 {
    (p * (1.0 - p) / m as f64).sqrt()
}

/// Mean and Monte Carlo standard error.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let m = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / m;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0);
    (mean, (var / m).sqrt())
}
