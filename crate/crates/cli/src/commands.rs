use std::sync::Arc;

use anyhow::{anyhow, Result};
use serde_json::{json, Value};

use pmlab::asymptotics::{
    birkhoff_average, correlation_decay, density_expectation, distortion_grid, neutral_orbit, CorrelationMethod,
    McOptions, OrbitStats,
};
use pmlab::cache::DensityCache;
use pmlab::cones::{check_c2, check_c3, check_cstar, check_cstar1, invariance_experiment, omega_table, ConeId, ConeParams};
use pmlab::grid::{orbit_len_for, Mesh, DEFAULT_ORBIT_LEN};
use pmlab::par::{map_indexed, Exec};
use pmlab::response::{
    finite_difference_response, response_series, response_series_forward, susceptibility, ForwardOptions,
    ResponseResult, SeriesOptions, SusceptibilityOptions,
};
use pmlab::transfer::{density, DensityMethod, DensityOptions, DensityRecord};
use pmlab::{MapParams, Observable};

use crate::config::Settings;
use crate::output::{num, Output, Table};

/// A numerical acceptance gate that did not hold.
#[derive(Debug)]
pub struct GateFailure(pub String);

impl std::fmt::Display for GateFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "gate failed: {}", self.0)
    }
}

impl std::error::Error for GateFailure {}

fn density_options(s: &Settings) -> DensityOptions {
    let method = if s.solver == "power" { DensityMethod::Power } else { DensityMethod::Induced };
    DensityOptions { tol: s.tol, max_iter: None, method }
}

fn mesh_for(s: &Settings, p: &MapParams) -> Result<Arc<Mesh>> {
    let l = s.orbit_len.unwrap_or_else(|| orbit_len_for(p, s.x_min, DEFAULT_ORBIT_LEN));
    Ok(Mesh::build(p, s.mesh, l, s.x_min)?)
}

fn cache(s: &Settings) -> Option<DensityCache> {
    if s.no_cache {
        None
    } else {
        Some(s.cache_dir.as_ref().map_or_else(DensityCache::from_env, DensityCache::new))
    }
}

/// Density at `alpha` on the configured mesh, from the cache when possible.
fn load_density(s: &Settings, alpha: f64) -> Result<(MapParams, DensityRecord, bool)> {
    let p = MapParams::new(alpha)?;
    let mesh = mesh_for(s, &p)?;
    let opts = density_options(s);
    let (rec, cached) = match cache(s) {
        Some(c) => c.get_or_compute(&p, &mesh, &opts)?,
        None => (density(&p, &mesh, &opts)?, false),
    };
    Ok((p, rec, cached))
}

fn converged_density(s: &Settings, alpha: f64) -> Result<(MapParams, DensityRecord)> {
    let (p, d, _) = load_density(s, alpha)?;
    d.require_converged()?;
    Ok((p, d))
}

fn series_options(s: &Settings) -> SeriesOptions {
    SeriesOptions { k_max: s.k_max, tol: s.series_tol, ..SeriesOptions::default() }
}

fn forward_options(s: &Settings) -> ForwardOptions {
    ForwardOptions { k_max: s.forward_terms, samples: s.samples, replicates: s.replicates, seed: s.seed }
}

fn susceptibility_options(s: &Settings) -> SusceptibilityOptions {
    SusceptibilityOptions { depth: s.depth, series: series_options(s) }
}

fn opt(x: Option<f64>) -> Value {
    x.map_or(Value::Null, num)
}

pub fn cmd_density(s: &Settings) -> Result<()> {
    let (p, d, cached) = load_density(s, s.alpha)?;
    let mut out = Output::new("density", s)?;
    let mut t = Table::new("density", &["x", "rho", "x_alpha_rho"]);
    let env = d.density.with_exponent(p.alpha());
    for ((x, r), e) in d.mesh().nodes().iter().zip(d.density.node_values()).zip(env.values()) {
        t.push(vec![num(*x), num(r), num(*e)]);
    }
    out.table(&t)?;
    let (c1, c2) = d.envelope();
    let summary = json!({
        "alpha": p.alpha(),
        "iterations": d.iterations,
        "residual": d.residual,
        "fixed_point_residual": d.fixed_point_residual,
        "converged": d.converged,
        "envelope": [c1, c2],
        "envelope_ratio": c2 / c1,
        "cached": cached,
    });
    out.json("density-summary", &summary)?;
    if !d.converged {
        out.json("density-record", &d)?;
    }
    println!(
        "density alpha={} iterations={} residual={:e} fixed_point_residual={:e} envelope_ratio={:.6} converged={} cached={}",
        p.alpha(),
        d.iterations,
        d.residual,
        d.fixed_point_residual,
        c2 / c1,
        d.converged,
        cached
    );
    if !d.converged {
        return Err(GateFailure(format!("density did not converge (residual {:e})", d.residual)).into());
    }
    Ok(())
}

fn result_row(t: &mut Table, r: &ResponseResult) {
    t.push(vec![
        json!(format!("{:?}", r.method)),
        num(r.value),
        json!(r.k_used),
        num(r.tail_estimate),
        opt(r.decay_exponent),
        opt(r.std_error),
    ]);
}

pub fn cmd_response(s: &Settings) -> Result<()> {
    let (p, d) = converged_density(s, s.alpha)?;
    let psi: Observable = s.obs.parse()?;
    let want = |m: &str| s.method == m || s.method == "all";
    let mut results = Vec::new();
    if want("series") {
        results.push(response_series(&p, &d, &psi, &series_options(s))?);
    }
    if want("forward") {
        results.push(response_series_forward(&p, &d, &psi, &forward_options(s))?);
    }
    if want("susceptibility") {
        if psi.is_smooth() {
            results.push(susceptibility(&p, &d, &psi, 1.0, &susceptibility_options(s))?);
        } else if s.method == "susceptibility" {
            return Err(anyhow!("susceptibility needs a C¹ observable, got {psi}"));
        }
    }
    let mut out = Output::new("response", s)?;
    let mut t = Table::new("response", &["method", "value", "k_used", "tail_estimate", "decay_exponent", "std_error"]);
    for r in &results {
        result_row(&mut t, r);
    }
    out.table(&t)?;
    let mut terms = Table::new("response-terms", &["method", "k", "t_k", "std_error"]);
    for r in &results {
        for (k, v) in r.terms.iter().enumerate() {
            let e = r.term_errors.as_ref().map_or(Value::Null, |e| num(e[k]));
            terms.push(vec![json!(format!("{:?}", r.method)), json!(k), num(*v), e]);
        }
    }
    out.table(&terms)?;
    for r in &results {
        println!("response alpha={} obs={} method={:?} value={:.12e} k_used={}", p.alpha(), psi, r.method, r.value, r.k_used);
    }
    Ok(())
}

fn rel(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        if a == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (a - b).abs() / b.abs()
    }
}

pub fn cmd_validate(s: &Settings) -> Result<()> {
    let (p, d) = converged_density(s, s.alpha)?;
    let psi: Observable = s.obs.parse()?;
    let series = response_series(&p, &d, &psi, &series_options(s))?;
    let fwd = response_series_forward(&p, &d, &psi, &forward_options(s))?;
    // forward partial sum completed with the backward tail beyond its last term
    let kf = fwd.terms.len();
    let fwd_value = fwd.value - series.terms.iter().skip(kf).sum::<f64>();
    let susc = if psi.is_smooth() { Some(susceptibility(&p, &d, &psi, 1.0, &susceptibility_options(s))?) } else { None };

    let mut eps = s.eps.clone();
    eps.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let fds = eps
        .iter()
        .map(|&e| finite_difference_response(&p, &psi, e, d.mesh(), s.tol))
        .collect::<pmlab::Result<Vec<_>>>()?;

    let mut t = Table::new("validate", &["method", "eps", "value", "std_error", "rel_diff_vs_series"]);
    t.push(vec![json!("series"), Value::Null, num(series.value), Value::Null, num(0.0)]);
    t.push(vec![json!("forward"), Value::Null, num(fwd_value), opt(fwd.std_error), num(rel(fwd_value, series.value))]);
    if let Some(r) = &susc {
        t.push(vec![json!("susceptibility"), Value::Null, num(r.value), Value::Null, num(rel(r.value, series.value))]);
    }
    for f in &fds {
        let name = if f.one_sided { "fd_one_sided" } else { "fd_central" };
        t.push(vec![json!(name), num(f.eps), num(f.value), Value::Null, num(rel(series.value, f.value))]);
        t.push(vec![json!("fd_richardson"), num(f.eps), num(f.extrapolated), Value::Null, num(rel(series.value, f.extrapolated))]);
    }
    let mut out = Output::new("validate", s)?;
    out.table(&t)?;

    let fd_small = fds.last().expect("eps is non-empty");
    let fd_rel = rel(series.value, fd_small.value);
    let mut failures = Vec::new();
    if !(fd_rel <= s.gate) {
        failures.push(format!("series vs FD(eps={}) rel diff {fd_rel:.3e}", fd_small.eps));
    }
    if let Some(r) = &susc {
        let sr = rel(r.value, series.value);
        if !(sr <= s.gate) {
            failures.push(format!("susceptibility vs series rel diff {sr:.3e}"));
        }
    }
    println!(
        "validate alpha={} obs={} series={:.10e} fd={:.10e} rel_diff={:.3e} gate={}",
        p.alpha(),
        psi,
        series.value,
        fd_small.value,
        fd_rel,
        s.gate
    );
    if failures.is_empty() {
        Ok(())
    } else {
        Err(GateFailure(failures.join("; ")).into())
    }
}

pub fn cmd_cones(s: &Settings) -> Result<()> {
    let (p, d) = converged_density(s, s.alpha)?;
    let cp = ConeParams::calibrated(&p, &d)?;
    let mut out = Output::new("cones", s)?;
    out.json("cones-params", &cp)?;
    let mut failures = Vec::new();

    let cones: Vec<ConeId> = match s.cone.as_str() {
        "all" => vec![ConeId::Cstar, ConeId::Cstar1, ConeId::C2, ConeId::C3],
        "omega" => vec![],
        c => vec![c.parse()?],
    };
    if !cones.is_empty() {
        let mut t = Table::new(
            "cones",
            &["cone", "k", "function", "a", "verdict", "worst_margin", "worst_node", "half_mass", "failing"],
        );
        let row = |t: &mut Table, cone: ConeId, k: usize, what: &str, r: &pmlab::cones::ConeReport| {
            let failing: Vec<&str> = r.margins.iter().filter(|m| m.worst < 0.0).map(|m| m.name.as_str()).collect();
            t.push(vec![
                json!(cone.to_string()),
                json!(k),
                json!(what),
                opt(r.a),
                json!(r.verdict),
                num(r.worst_margin),
                num(r.worst_node),
                opt(r.half_mass),
                json!(failing.join(" ")),
            ]);
        };
        for &cone in &cones {
            let rho = match cone {
                ConeId::Cstar => check_cstar(&d.density, &p, &d, cp.a)?,
                ConeId::Cstar1 => check_cstar1(&d.density, &p, &d, cp.a, cp.b1)?,
                ConeId::C2 => check_c2(&d.density, &cp),
                ConeId::C3 => check_c3(&d.density, &cp),
            };
            row(&mut t, cone, 0, "rho", &rho);
            for st in invariance_experiment(&p, &d, cone, &cp, s.iterations)? {
                row(&mut t, cone, st.k, "iterate", &st.iterate);
                row(&mut t, cone, st.k, "n_image", &st.n_image);
                if !st.iterate.verdict {
                    failures.push(format!("{cone} iterate k={}", st.k));
                }
                let n_gated = match cone {
                    ConeId::Cstar1 => st.iterate.half_mass_ok(),
                    ConeId::C2 | ConeId::C3 => true,
                    ConeId::Cstar => false,
                };
                if n_gated && !st.n_image.verdict {
                    failures.push(format!("{cone} N-image k={}", st.k));
                }
            }
        }
        out.table(&t)?;
    }
    if s.cone == "omega" || s.cone == "all" {
        let om = omega_table(&p, &cp, s.grid);
        let mut t = Table::new("omega", &["y", "omega1", "omega2", "omega3", "omega1_bar", "omega2_bar"]);
        let tol = 1e-12;
        for o in &om {
            t.push(vec![num(o.y), num(o.omega1), num(o.omega2), num(o.omega3), num(o.omega1_bar), num(o.omega2_bar)]);
            if o.omega1 > 1.0 + tol || o.omega2 > 1.0 + tol {
                failures.push(format!("omega1/omega2 > 1 at y={}", o.y));
            }
            if cp.b3_admissible && o.omega3 > 1.0 + tol {
                failures.push(format!("omega3 > 1 at y={}", o.y));
            }
        }
        out.table(&t)?;
        let max = |f: fn(&pmlab::cones::Omegas) -> f64| om.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        println!(
            "omega alpha={} max_omega1={:.15} max_omega2={:.15} max_omega3={:.6} b3={} b3_admissible={}",
            p.alpha(),
            max(|o| o.omega1),
            max(|o| o.omega2),
            max(|o| o.omega3),
            cp.b3,
            cp.b3_admissible
        );
    }
    println!("cones alpha={} cone={} failures={}", p.alpha(), s.cone, failures.len());
    if failures.is_empty() {
        Ok(())
    } else {
        failures.truncate(10);
        Err(GateFailure(failures.join("; ")).into())
    }
}

pub fn cmd_decay(s: &Settings) -> Result<()> {
    let (p, d) = converged_density(s, s.alpha)?;
    let psi: Observable = s.obs.parse()?;
    let phi: Observable = s.phi.parse()?;
    let method = if s.decay_method == "montecarlo" { CorrelationMethod::MonteCarlo } else { CorrelationMethod::Operator };
    let mc = McOptions {
        n_orbits: s.orbits.max(2),
        orbit_len: s.birkhoff_length(),
        burn_in: s.burn_in,
        seed: s.seed,
    };
    let curve = correlation_decay(&p, &d, &psi, &phi, s.lags, method, &mc)?;
    let orbit = neutral_orbit(&p, s.ell_max)?;
    let mut out = Output::new("decay", s)?;

    let mut t = Table::new("decay-correlations", &["n", "c_n", "std_error"]);
    for (n, v) in curve.values.iter().enumerate() {
        let e = curve.std_errors.as_ref().map_or(Value::Null, |e| num(e[n]));
        t.push(vec![json!(n), num(*v), e]);
    }
    out.table(&t)?;
    let mut t = Table::new("decay-orbit", &["ell", "x_ell", "bound", "margin"]);
    for (ell, x) in orbit.x_ell.iter().enumerate().skip(1) {
        let b = OrbitStats::upper_bound(p.alpha(), ell);
        let m = if b.is_finite() { (b - x) / b } else { f64::INFINITY };
        t.push(vec![json!(ell), num(*x), num(b), num(m)]);
    }
    out.table(&t)?;

    let distortion = if p.alpha() > 0.0 { Some(distortion_grid(&p, &[10, 30, 100, 300], &[10, 30, 100, 300])?) } else { None };
    let birkhoff = if s.orbits > 0 {
        let r = birkhoff_average(&p, &psi, s.orbits, s.birkhoff_length(), s.burn_in, s.seed)?;
        Some(json!({ "mean": r.mean, "std_error": r.std_error, "samples": r.samples, "density_mean": density_expectation(&d, &psi)? }))
    } else {
        None
    };
    let summary = json!({
        "alpha": p.alpha(),
        "psi": curve.psi,
        "phi": curve.phi,
        "method": curve.method,
        "centering": curve.centering,
        "fit": curve.fit,
        "rate_ok": curve.rate_ok,
        "orbit": {
            "ell_max": orbit.ell_max,
            "fitted_exponent": orbit.fitted_exponent,
            "upper_ok": orbit.upper_ok,
            "upper_margin": num(orbit.upper_margin),
            "lower_c": orbit.lower_c,
            "lower_ok": orbit.lower_ok,
        },
        "distortion": distortion,
        "birkhoff": birkhoff,
    });
    out.json("decay-summary", &summary)?;
    println!(
        "decay alpha={} psi={} phi={} exponent={} orbit_exponent={} upper_ok={}",
        p.alpha(),
        psi,
        phi,
        curve.fit.map_or("n/a".into(), |f| format!("{:.4}", f.exponent)),
        orbit.fitted_exponent.map_or("n/a".into(), |e| format!("{e:.4}")),
        orbit.upper_ok
    );
    if !orbit.upper_ok {
        return Err(GateFailure("neutral orbit exceeds its upper bound".into()).into());
    }
    Ok(())
}

pub fn cmd_sweep(s: &Settings) -> Result<()> {
    let psi: Observable = s.obs.parse()?;
    let rows = map_indexed(Exec::default(), s.alphas.len(), |i| -> Result<(f64, f64, ResponseResult)> {
        let a = s.alphas[i];
        let (p, d) = converged_density(s, a)?;
        let mean = density_expectation(&d, &psi)?;
        Ok((a, mean, response_series(&p, &d, &psi, &series_options(s))?))
    });
    let mut t = Table::new("sweep", &["alpha", "mean", "response", "tail_estimate", "k_used", "status"]);
    let mut failures = Vec::new();
    for (i, r) in rows.into_iter().enumerate() {
        match r {
            Ok((a, mean, r)) => {
                t.push(vec![num(a), num(mean), num(r.value), num(r.tail_estimate), json!(r.k_used), json!("ok")]);
            }
            Err(e) => {
                let a = s.alphas[i];
                t.push(vec![num(a), Value::Null, Value::Null, Value::Null, Value::Null, json!(e.to_string())]);
                failures.push(format!("alpha={a}: {e}"));
            }
        }
    }
    let mut out = Output::new("sweep", s)?;
    out.table(&t)?;
    println!("sweep obs={} points={} failures={}", psi, s.alphas.len(), failures.len());
    if failures.is_empty() {
        Ok(())
    } else {
        Err(GateFailure(failures.join("; ")).into())
    }
}
