use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use dwad_core::dgp::{self, DgpSpec};
use dwad_core::dwad::{self, VarianceKind};
use dwad_core::edgeworth::{self, DwadExpansionInputs};
use dwad_core::simlab::{self, fmt_num, CdfGrid, ExperimentPlan};
use dwad_core::{normal, verify_moments, Error, Kernel, Result};

use crate::io::{emit, parse_vector, read_sample, write_atomic};
use crate::{EdgeworthArgs, EstimateArgs, KernelCheckArgs, SimulateArgs, TruthArgs};

fn csv_text(header: &[&str], rows: &[Vec<String>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Numerical(format!("csv: {e}"));
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.write_record(r).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Numerical(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("--{name} must be positive and finite, got {v}")))
    }
}

pub fn kernel_check(a: &KernelCheckArgs) -> Result<()> {
    check_positive("tol", a.tol)?;
    let kernel = Kernel::higher_order(a.dim, a.order)?;
    let report = verify_moments(&kernel, a.tol)?;
    let rows: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| {
            vec![r.index.to_string(), fmt_num(r.value), fmt_num(r.target), fmt_num(r.abs_error), r.pass.to_string()]
        })
        .collect();
    emit(a.out.as_deref(), &csv_text(&["multi_index", "value", "target", "abs_error", "pass"], &rows)?)?;
    if report.all_pass() {
        Ok(())
    } else {
        let failed: Vec<String> = report.rows.iter().filter(|r| !r.pass).map(|r| r.index.to_string()).collect();
        Err(Error::Assumption(format!(
            "kernel moment conditions fail at tol {} for {}{}",
            a.tol,
            if failed.is_empty() { "none of the indices".to_string() } else { failed.join(" ") },
            if report.tails_finite { "" } else { "; tail integrals are not bounded" }
        )))
    }
}

fn axes(d: usize) -> Vec<Vec<f64>> {
    (0..d).map(|k| (0..d).map(|j| (j == k) as u8 as f64).collect()).collect()
}

pub fn estimate(a: &EstimateArgs) -> Result<()> {
    check_positive("bandwidth", a.bandwidth)?;
    if !(a.alpha > 0.0 && a.alpha < 1.0) {
        return Err(Error::Config(format!("--alpha must lie in (0, 1), got {}", a.alpha)));
    }
    let kernel = Kernel::higher_order(a.dim, a.order)?;
    let directions = if a.directions.is_empty() {
        axes(a.dim)
    } else {
        a.directions.iter().map(|s| parse_vector(s)).collect::<Result<Vec<_>>>()?
    };
    for v in &directions {
        if v.len() != a.dim {
            return Err(Error::Config(format!("direction {v:?} has {} entries, expected {}", v.len(), a.dim)));
        }
    }
    let sample = read_sample(&a.data, a.dim)?;
    let fit = dwad::estimate(&sample, &kernel, a.bandwidth)?;
    let mut rows = Vec::with_capacity(directions.len());
    for v in &directions {
        let al = dwad::confidence_interval(&fit, v, a.alpha, VarianceKind::Al)?;
        let sb = dwad::confidence_interval(&fit, v, a.alpha, VarianceKind::Sb)?;
        let c = normal::two_sided_critical(a.alpha);
        rows.push(vec![
            v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" "),
            fmt_num(al.center),
            fmt_num(al.half_width / c),
            fmt_num(sb.half_width / c),
            fmt_num(al.lower()),
            fmt_num(al.upper()),
            fmt_num(sb.lower()),
            fmt_num(sb.upper()),
        ]);
    }
    let header = ["direction", "estimate", "se_al", "se_sb", "ci_al_lo", "ci_al_hi", "ci_sb_lo", "ci_sb_hi"];
    emit(a.out.as_deref(), &csv_text(&header, &rows)?)
}

fn direction_or_ones(s: Option<&str>, d: usize) -> Result<Vec<f64>> {
    match s {
        Some(s) => parse_vector(s),
        None => Ok(vec![1.0; d]),
    }
}

pub fn truth(a: &TruthArgs) -> Result<()> {
    let spec = DgpSpec::preset(&a.dgp, a.dim, a.noise)?;
    let kernel = Kernel::higher_order(a.dim, a.order)?;
    let v = direction_or_ones(a.direction.as_deref(), a.dim)?;
    let pf = dgp::population_functionals(&spec, &kernel, &v)?;
    let checks = dgp::assumption_checklist(&spec)?;
    let d = a.dim;

    let mut rows: Vec<(String, f64, String)> = Vec::new();
    let mut put = |k: String, v: f64, note: &str| rows.push((k, v, note.to_string()));
    for k in 0..d {
        put(format!("theta[{}]", k + 1), pf.theta[k], "E[f gdot]");
    }
    for k in 0..d {
        put(format!("theta_ibp[{}]", k + 1), pf.diagnostics.theta_ibp[k], "-2E[Y fdot]");
    }
    for i in 0..d {
        for j in 0..d {
            put(format!("Sigma[{},{}]", i + 1, j + 1), pf.sigma[(i, j)], "");
        }
    }
    for i in 0..d {
        for j in 0..d {
            put(format!("Delta[{},{}]", i + 1, j + 1), pf.delta[(i, j)], "");
        }
    }
    put("theta_v".into(), pf.theta_v, "");
    put("sigma_v2".into(), pf.sigma_v2, "");
    put("delta_v2".into(), pf.delta_v2, "");
    put("beta_v".into(), pf.beta_v, "");
    put("kappa1_v".into(), pf.kappa1_v, "");
    put("kappa2_v".into(), pf.kappa2_v, "");
    put("weighted_noise".into(), pf.diagnostics.weighted_noise, "E[V(Y|X) f(X)]");
    put("e_phi2".into(), pf.diagnostics.e_phi2, "E[phi_v^2]");
    let k2 = &pf.diagnostics.kappa2;
    for (h, j) in &k2.table {
        put(format!("kappa2_J(h={h})"), *j, "finite-h cross moment");
    }
    for (i, e) in k2.extrapolants.iter().enumerate() {
        put(format!("kappa2_extrapolant[{i}]"), *e, "");
    }
    put("kappa2_stability".into(), k2.stability, "relative gap of last two extrapolants");
    put("kappa2_finite_difference".into(), k2.finite_difference, "limit cross moment by differencing");
    if let (Some(n), Some(h)) = (a.n, a.bandwidth) {
        check_positive("bandwidth", h)?;
        if n < 3 {
            return Err(Error::Config(format!("--n must be at least 3, got {n}")));
        }
        put("omega_v2".into(), pf.omega_v2(n, h), "leading-term variance at (n, h)");
        put("r_n".into(), edgeworth::rn(n, h, a.order, d), "");
    }
    let mut out: Vec<Vec<String>> = rows.into_iter().map(|(k, v, note)| vec![k, fmt_num(v), note]).collect();
    for c in &checks.checks {
        out.push(vec![format!("check:{}", c.label), (c.passed as u8).to_string(), c.detail.clone()]);
    }
    emit(a.out.as_deref(), &csv_text(&["quantity", "value", "note"], &out)?)?;
    checks.into_result().map(|_| ())
}

/// Flat key = value reader shared with the expansion config.
fn read_pairs(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("{}:{}: expected 'key = value'", path.display(), i + 1)))?;
        if map.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("{}:{}: key '{}' given twice", path.display(), i + 1, k.trim())));
        }
    }
    Ok(map)
}

fn take<T: std::str::FromStr>(map: &mut BTreeMap<String, String>, key: &str) -> Result<Option<T>> {
    map.remove(key)
        .map(|v| v.parse::<T>().map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'"))))
        .transpose()
}

fn need<T: std::str::FromStr>(map: &mut BTreeMap<String, String>, key: &str) -> Result<T> {
    take(map, key)?.ok_or_else(|| Error::Config(format!("missing key '{key}'")))
}

/// Expansion inputs from either a preset design (`dgp = ...`) or explicit constants.
#[allow(clippy::neg_cmp_op_on_partial_ord)]
fn expansion_inputs(map: &mut BTreeMap<String, String>) -> Result<(DwadExpansionInputs, CdfGrid)> {
    let n: usize = need(map, "n")?;
    let h: f64 = need(map, "h")?;
    let d: usize = need(map, "dim")?;
    let p: u32 = need(map, "order")?;
    let grid = match map.remove("grid") {
        Some(g) => {
            let g = parse_vector(&g)?;
            if g.len() != 3 || g[2] < 1.0 || g[2].fract() != 0.0 || !(g[0] < g[1]) {
                return Err(Error::Config("grid: expected 'lo, hi, points' with lo < hi".into()));
            }
            CdfGrid { lo: g[0], hi: g[1], points: g[2] as usize }
        }
        None => CdfGrid { lo: -4.0, hi: 4.0, points: 81 },
    };
    let inputs = if let Some(name) = map.remove("dgp") {
        let noise: f64 = take(map, "noise")?.unwrap_or(1.0);
        let v = direction_or_ones(map.remove("direction").as_deref(), d)?;
        let spec = DgpSpec::preset(&name, d, noise)?;
        let kernel = Kernel::higher_order(d, p)?;
        let pf = dgp::population_functionals(&spec, &kernel, &v)?;
        let ratio = match map.remove("standardization").as_deref() {
            None | Some("omega") => 1.0,
            Some("sigma") => pf.omega_v2(n, h) * n as f64 / pf.sigma_v2,
            Some(other) => {
                return Err(Error::Config(format!("standardization must be 'omega' or 'sigma', got '{other}'")))
            }
        };
        pf.expansion_inputs(n, h, ratio)
    } else {
        DwadExpansionInputs {
            n,
            h,
            d,
            p,
            sigma_v: need(map, "sigma_v")?,
            delta_v2: need(map, "delta_v2")?,
            beta_v: need(map, "beta_v")?,
            kappa1_v: need(map, "kappa1_v")?,
            kappa2_v: need(map, "kappa2_v")?,
            vartheta_ratio: take(map, "vartheta_ratio")?.unwrap_or(1.0),
        }
    };
    if let Some(k) = map.keys().next() {
        return Err(Error::Config(format!("unknown or conflicting key '{k}'")));
    }
    inputs.validate()?;
    Ok((inputs, grid))
}

pub fn edgeworth(a: &EdgeworthArgs) -> Result<()> {
    let mut map = read_pairs(&a.config)?;
    let (inp, grid) = expansion_inputs(&mut map)?;
    let rows: Vec<Vec<String>> = grid
        .values()
        .into_iter()
        .map(|x| {
            vec![
                fmt_num(x),
                fmt_num(normal::cdf(x)),
                fmt_num(edgeworth::std_expansion(&inp, x)),
                fmt_num(edgeworth::studentized_al(&inp, x)),
                fmt_num(edgeworth::studentized_sb(&inp, x)),
            ]
        })
        .collect();
    emit(a.out.as_deref(), &csv_text(&["x", "Phi", "G", "G_AL", "G_SB"], &rows)?)
}

pub fn simulate(a: &SimulateArgs) -> Result<()> {
    let text = fs::read_to_string(&a.config)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", a.config.display())))?;
    let mut plan = ExperimentPlan::parse(&text)?;
    plan.base.seed = Some(a.seed);
    let work = || simlab::run_plan(&plan);
    let runs = match a.threads {
        Some(0) => return Err(Error::Config("--threads must be at least 1".into())),
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {t} worker threads: {e}")))?
            .install(work)?,
        None => work()?,
    };
    fs::create_dir_all(&a.out)?;
    write_atomic(&a.out.join("results.csv"), &simlab::comparison_csv(&simlab::plan_comparison_table(&runs))?)?;
    write_atomic(&a.out.join("cdf_grid.csv"), &simlab::cdf_grid_csv(&runs)?)?;
    write_atomic(&a.out.join("diagnostics.csv"), &simlab::diagnostics_csv(&runs)?)?;
    for result in runs.iter().map(|r| &r.result).filter(|r| r.unreliable()) {
        eprintln!(
            "dwad: warning: n = {}, h = {}: {} of {} replications had a non-positive SB variance; SB results are unreliable",
            result.n, result.h, result.sb_degenerate, result.replications
        );
    }
    Ok(())
}
