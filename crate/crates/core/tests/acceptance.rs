//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any fails.

use std::f64::consts::LN_2;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use pmlab::asymptotics::{
    birkhoff_average, correlation_decay, correlations_operator, density_expectation, distortion_grid,
    neutral_orbit, Centering, CorrelationMethod, McOptions, OrbitStats,
};
use pmlab::cones::{invariance_experiment, omega_table, ConeId, ConeParams};
use pmlab::grid::{GridFunction, Mesh};
use pmlab::response::{
    response_series, response_series_forward, response_source, susceptibility, ForwardOptions, SeriesOptions,
    SusceptibilityOptions,
};
use pmlab::transfer::{
    build_ulam, compute_density, density, seven_term_decomposition, solve_density, ulam_stationary, DensityOptions,
    DensityRecord, TransferOperator,
};
use pmlab::{MapParams, Observable};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn params(a: f64) -> MapParams {
    MapParams::new(a).unwrap()
}

fn solved(a: f64, n: usize) -> (MapParams, DensityRecord) {
    let p = params(a);
    let mesh = Mesh::standard(&p, n).unwrap();
    let d = solve_density(&p, &mesh, 1e-13, 10_000).unwrap();
    assert!(d.converged, "density at α={a}, n={n} did not converge");
    (p, d)
}

fn obs(s: &str) -> Observable {
    s.parse().unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn c1_fixed_point() -> Outcome {
    let p = params(0.0);
    let mesh = Mesh::standard(&p, 4096).unwrap();
    let d = compute_density(&p, &mesh, 1e-14, 1).unwrap();
    let dev = d.density.node_values().iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max);
    outcome(
        d.converged && d.iterations == 1 && d.residual <= 1e-14 && dev <= 1e-14,
        format!("iterations={} residual={:.2e} max|ρ−1|={:.2e}", d.iterations, d.residual, dev),
    )
}

fn c2_envelope() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for a in [0.1, 0.25, 0.4, 0.6] {
        let (_, d1) = solved(a, 4096);
        let (_, d2) = solved(a, 8192);
        let (l1, h1) = d1.envelope();
        let (l2, h2) = d2.envelope();
        let ratio = h2 / l2;
        let drift = rel(l2, l1).max(rel(h2, h1));
        pass &= l1 > 0.0 && ratio <= 20.0 && drift < 0.05;
        parts.push(format!("α={a}: c₂/c₁={ratio:.3} drift={drift:.1e}"));
    }
    outcome(pass, parts.join("; "))
}

fn log_envelope(y: &GridFunction) -> f64 {
    y.mesh()
        .nodes()
        .iter()
        .zip(y.node_values())
        .map(|(x, v)| v.abs() / (x.ln().abs() + 1.0))
        .fold(0.0, f64::max)
}

fn c3_cancellation() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for a in [0.1, 0.25, 0.4, 0.6] {
        let (p, d1) = solved(a, 4096);
        let (_, d2) = solved(a, 8192);
        let y1 = response_source(&p, &d1).unwrap();
        let y2 = response_source(&p, &d2).unwrap();
        let mean = y1.integrate().unwrap().abs().max(y2.integrate().unwrap().abs());
        let (s1, s2) = (log_envelope(&y1), log_envelope(&y2));
        let drift = rel(s2, s1);
        pass &= mean <= 1e-8 && drift < 0.10;
        parts.push(format!("α={a}: |∫Y|={mean:.1e} sup={s2:.4} drift={drift:.1e}"));
    }
    outcome(pass, parts.join("; "))
}

fn c4_exact_source() -> Outcome {
    let (p, d) = solved(0.0, 4096);
    let y = response_source(&p, &d).unwrap();
    let err = d
        .mesh()
        .nodes()
        .iter()
        .zip(y.node_values())
        .map(|(x, v)| (v - (1.0 + LN_2 + (x / 2.0).ln()) / 4.0).abs())
        .fold(0.0, f64::max);
    outcome(err <= 1e-10, format!("max nodal error {err:.2e}"))
}

/// `∫ψ dμ_b` on the mesh of `p`, for several ψ at once.
fn means_at(b: f64, mesh: &Arc<Mesh>, psis: &[Observable]) -> Vec<f64> {
    let q = params(b);
    let d = density(&q, mesh, &DensityOptions::default()).unwrap();
    assert!(d.converged);
    psis.iter().map(|s| density_expectation(&d, s).unwrap()).collect()
}

fn c5_response_vs_fd() -> Outcome {
    let t0 = Instant::now();
    let psis = [obs("x"), obs("x^2"), obs("cos")];
    let mut pass = true;
    let mut parts = Vec::new();
    for a in [0.0, 0.1, 0.25, 0.4] {
        let (p, d) = solved(a, 4096);
        let mesh = d.mesh().clone();
        let quotient = |h: f64| -> Vec<f64> {
            if a == 0.0 {
                let up = means_at(h, &mesh, &psis);
                let base = means_at(0.0, &mesh, &psis);
                up.iter().zip(&base).map(|(u, b)| (u - b) / h).collect()
            } else {
                let up = means_at(a + h, &mesh, &psis);
                let dn = means_at(a - h, &mesh, &psis);
                up.iter().zip(&dn).map(|(u, v)| (u - v) / (2.0 * h)).collect()
            }
        };
        let fd_big = quotient(1e-2);
        let fd = quotient(5e-3);
        for (i, psi) in psis.iter().enumerate() {
            let s = response_series(&p, &d, psi, &SeriesOptions::default()).unwrap();
            let err = rel(s.value, fd[i]);
            let step = rel(fd[i], fd_big[i]);
            // the quotient is converging when halving ε moves it by less than the gate
            let ok = err <= 0.03 && step <= 0.03;
            pass &= ok;
            parts.push(format!("α={a} {psi}: rel={err:.1e} Δfd={step:.1e}"));
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    pass &= secs <= 600.0;
    outcome(pass, format!("{} ({secs:.0}s)", parts.join("; ")))
}

fn c6_susceptibility() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for a in [0.1, 0.25] {
        let (p, d) = solved(a, 4096);
        for psi in [obs("x"), obs("x^2"), obs("cos")] {
            let s = response_series(&p, &d, &psi, &SeriesOptions::default()).unwrap();
            let z = susceptibility(&p, &d, &psi, 1.0, &SusceptibilityOptions::default()).unwrap();
            let err = rel(z.value, s.value);
            pass &= err <= 0.03;
            parts.push(format!("α={a} {psi}: rel={err:.1e}"));
        }
    }
    outcome(pass, parts.join("; "))
}

/// `∫ψ (L^k Y) dy` for `k = 0..=depth`, summing over all inverse-branch
/// compositions on a Gauss rule refined towards 0.
fn branch_sum_terms(a: f64, y: &GridFunction, psi: &Observable, depth: usize) -> Vec<f64> {
    const G: [(f64, f64); 4] = [
        (0.069_431_844_202_973_71, 0.173_927_422_568_726_93),
        (0.330_009_478_207_571_87, 0.326_072_577_431_273_07),
        (0.669_990_521_792_428_1, 0.326_072_577_431_273_07),
        (0.930_568_155_797_026_3, 0.173_927_422_568_726_93),
    ];
    let mut pts = Vec::new();
    let mut panels = vec![(0.0, 2f64.powi(-40))];
    for m in (0..40).rev() {
        let (lo, hi) = (2f64.powi(-m - 1), 2f64.powi(-m));
        for s in 0..4 {
            let w = (hi - lo) / 4.0;
            panels.push((lo + s as f64 * w, lo + (s + 1) as f64 * w));
        }
    }
    for (lo, hi) in panels {
        for (t, w) in G {
            pts.push((lo + (hi - lo) * t, (hi - lo) * w));
        }
    }
    let c = 2f64.powf(a);
    let left_inv = |v: f64| {
        // x(1 + 2^α x^α) = v by Newton from v
        let mut x = v;
        for _ in 0..100 {
            let f = x * (1.0 + c * x.powf(a)) - v;
            let df = 1.0 + (1.0 + a) * c * x.powf(a);
            let nx = (x - f / df).max(0.5 * x);
            if (nx - x).abs() <= 1e-17 * x {
                return nx;
            }
            x = nx;
        }
        x
    };
    let w0: Vec<f64> = pts.iter().map(|&(v, w)| w * psi.eval(v)).collect();
    let mut terms = vec![0.0; depth + 1];
    fn walk(
        xs: Vec<(f64, f64)>,
        level: usize,
        depth: usize,
        ctx: &(&dyn Fn(f64) -> f64, &GridFunction, &[f64], f64, f64),
        terms: &mut [f64],
    ) {
        let (left_inv, y, w0, a, c) = *ctx;
        terms[level] += xs.iter().zip(w0).map(|(&(x, jac), w)| w * jac * y.interpolate(x)).sum::<f64>();
        if level == depth {
            return;
        }
        let left = xs
            .iter()
            .map(|&(x, jac)| {
                let u = left_inv(x);
                (u, jac / (1.0 + (1.0 + a) * c * u.powf(a)))
            })
            .collect();
        walk(left, level + 1, depth, ctx, terms);
        let right = xs.iter().map(|&(x, jac)| (0.5 * (x + 1.0), 0.5 * jac)).collect();
        walk(right, level + 1, depth, ctx, terms);
    }
    let start: Vec<(f64, f64)> = pts.iter().map(|&(v, _)| (v, 1.0)).collect();
    walk(start, 0, depth, &(&left_inv, y, &w0, a, c), &mut terms);
    terms
}

fn c7_duality() -> Outcome {
    let (p, d) = solved(0.25, 8192);
    let psi = obs("x");
    let back = response_series(&p, &d, &psi, &SeriesOptions { k_max: 61, tol: 0.0, min_terms: 61 }).unwrap();
    let y = response_source(&p, &d).unwrap();
    let depth = 12;
    let exact = branch_sum_terms(0.25, &y, &psi, depth);
    let det_err = (0..=depth).map(|k| (exact[k] - back.terms[k]).abs()).fold(0.0, f64::max);
    let fwd = response_series_forward(&p, &d, &psi, &ForwardOptions { k_max: 61, samples: 1 << 16, ..Default::default() })
        .unwrap();
    let se = fwd.term_errors.as_ref().unwrap();
    let z = (0..=60).map(|k| (fwd.terms[k] - back.terms[k]).abs() / se[k]).fold(0.0, f64::max);
    // two-sided 1% family-wise level over 61 terms, Student t with 31 degrees of freedom
    let t_crit = 4.29;
    let mc_ok = fwd.term_errors.is_some() && (0..=60).all(|k| (fwd.terms[k] - back.terms[k]).abs() <= t_crit * se[k]);
    outcome(
        det_err <= 1e-8 && mc_ok,
        format!("branch-sum k≤{depth}: max|Δt_k|={det_err:.1e}; sampled k≤60: max|Δt_k|/SE={z:.2} (limit {t_crit})"),
    )
}

fn c8_cone_invariance() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for a in [0.1, 0.25, 0.4] {
        let (p, d) = solved(a, 4096);
        let cp = ConeParams::calibrated(&p, &d).unwrap();
        let mut worst = f64::INFINITY;
        for cone in [ConeId::Cstar, ConeId::Cstar1, ConeId::C2] {
            let steps = invariance_experiment(&p, &d, cone, &cp, 20).unwrap();
            for s in &steps {
                pass &= s.iterate.verdict && s.iterate.worst_margin >= 0.0;
                worst = worst.min(s.iterate.worst_margin);
                if cone == ConeId::Cstar1 {
                    pass &= s.n_image.verdict && s.n_image.worst_margin >= 0.0;
                    worst = worst.min(s.n_image.worst_margin);
                }
            }
        }
        parts.push(format!("α={a}: a={:.3} worst margin {worst:.2e}", cp.a));
    }
    outcome(pass, parts.join("; "))
}

fn c9_omegas() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    let (p0, d0) = solved(0.0, 1024);
    let cp0 = ConeParams::calibrated(&p0, &d0).unwrap();
    let dev = omega_table(&p0, &cp0, 512)
        .iter()
        .map(|o| (o.omega1 - 1.0).abs().max((o.omega2 - 1.0).abs()))
        .fold(0.0, f64::max);
    pass &= dev <= 1e-12;
    parts.push(format!("α=0: max|Ω₁,₂−1|={dev:.1e}"));
    for a in [0.1, 0.25, 0.3, 0.4] {
        let (p, d) = solved(a, 2048);
        let cp = ConeParams::calibrated(&p, &d).unwrap();
        let regime = cp.b1 >= a + 1.0 && cp.b2 > 3.0 * cp.b1 * (1.0 + a) + 20.0;
        let t = omega_table(&p, &cp, 512);
        let m1 = t.iter().map(|o| o.omega1).fold(0.0, f64::max);
        let m2 = t.iter().map(|o| o.omega2).fold(0.0, f64::max);
        let m3 = t.iter().map(|o| o.omega3).fold(0.0, f64::max);
        pass &= regime && m1 <= 1.0 && m2 <= 1.0 && cp.b3_admissible && m3 <= 1.0;
        parts.push(format!("α={a}: maxΩ₁={m1:.4} maxΩ₂={m2:.4} maxΩ₃={m3:.4} (b₃={:.3})", cp.b3));
    }
    outcome(pass, parts.join("; "))
}

fn c10_neutral_orbit() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for a in [0.25, 0.5, 0.75] {
        let s = neutral_orbit(&params(a), 10_000).unwrap();
        // the bound re-evaluated here, independently of the library's flag
        let bound_ok = s.x_ell.iter().enumerate().skip(1).all(|(l, &x)| x <= OrbitStats::upper_bound(a, l));
        let e = s.fitted_exponent.unwrap();
        let ok = bound_ok && s.upper_ok && rel(e, -1.0 / a) <= 0.05;
        pass &= ok;
        parts.push(format!("α={a}: exponent {e:.3} (target {:.3}) upper={bound_ok}", -1.0 / a));
    }
    outcome(pass, parts.join("; "))
}

fn c11_distortion() -> Outcome {
    let grid = [10, 30, 100, 300];
    let g = distortion_grid(&params(0.5), &grid, &grid).unwrap();
    outcome(
        g.spread <= 10.0 && g.points.iter().all(|q| q.scaled <= g.c_fit),
        format!("C={:.3} spread={:.3}", g.c_fit, g.spread),
    )
}

fn c12_correlations() -> Outcome {
    let t0 = Instant::now();
    let (p0, d0) = solved(0.0, 4096);
    let mut pass = true;
    let mut parts = Vec::new();
    for (psi, phi) in [(obs("x"), obs("x")), (obs("cos"), obs("tent:0,1")), (obs("x^2"), obs("tent:0.5,1"))] {
        let c = correlations_operator(&p0, &d0, &psi, &phi, 40, Centering::Constant).unwrap();
        let k = (0..=10).map(|n| c[n].abs() * 2f64.powi(n as i32)).fold(0.0, f64::max) * 1.01;
        let ok = k > 0.0 && c.iter().enumerate().all(|(n, v)| v.abs() <= k * 2f64.powi(-(n as i32)) + 1e-15);
        pass &= ok;
        parts.push(format!("α=0 ({psi},{phi}): C={k:.3e} {}", if ok { "ok" } else { "violated" }));
    }
    let (p, d) = solved(0.5, 8192);
    let curve = correlation_decay(
        &p,
        &d,
        &obs("x"),
        &obs("bump:0.5,1"),
        200,
        CorrelationMethod::Operator,
        &McOptions::default(),
    )
    .unwrap();
    let e = curve.fit.unwrap().exponent;
    let secs = t0.elapsed().as_secs_f64();
    pass &= (e + 2.0).abs() <= 0.4 && curve.rate_ok == Some(true) && secs <= 900.0;
    parts.push(format!("α=0.5 exponent {e:.3} ({secs:.0}s)"));
    outcome(pass, parts.join("; "))
}

fn c13_oracle_triangle() -> Outcome {
    let psi = Observable::identity();
    let (p, d) = solved(0.3, 4096);
    let grid = density_expectation(&d, &psi).unwrap();
    let cells = Mesh::standard(&p, 1 << 16).unwrap();
    let u = ulam_stationary(&build_ulam(&p, &cells), 1e-13, 1_000_000).unwrap();
    let ulam = u.integrate_against(&|x| x);
    let b = birkhoff_average(&p, &psi, 64, 1_010_000, 10_000, 0x0b1d).unwrap();
    let tol = (3.0 * b.std_error).max(5e-4);
    let pairs = [(grid - ulam).abs(), (grid - b.mean).abs(), (ulam - b.mean).abs()];
    outcome(
        b.std_error < 1e-4 && pairs.iter().all(|&x| x <= tol),
        format!(
            "grid={grid:.6} ulam={ulam:.6} birkhoff={:.6}±{:.1e} max pair gap {:.1e} (tol {tol:.1e})",
            b.mean,
            b.std_error,
            pairs.iter().fold(0.0f64, |m, x| m.max(*x))
        ),
    )
}

fn l1_distance(a: &GridFunction, b: &GridFunction) -> f64 {
    a.sub(b).unwrap().l1_norm().unwrap()
}

fn c14_operator_derivatives() -> Outcome {
    let a = 0.3;
    let (p, d) = solved(a, 16384);
    let mesh = d.mesh();
    let mut pass = true;
    let mut parts = Vec::new();
    let one = GridFunction::constant(mesh, 1.0);
    for (name, f) in [("1", &one), ("ρ", &d.density)] {
        let s = f.exponent();
        let op = |b: f64| TransferOperator::new(&params(b), mesh, s);
        let m = op(a).apply_m(f).unwrap();
        let d2 = op(a).apply_d2l(f).unwrap();
        let l0 = op(a).apply(f).unwrap();
        let mut e1 = Vec::new();
        let mut e2 = Vec::new();
        for eps in [1e-3, 5e-4] {
            let up = op(a + eps).apply(f).unwrap();
            let dn = op(a - eps).apply(f).unwrap();
            let first = up.sub(&dn).unwrap().scale(0.5 / eps);
            let second = up.add(&dn).unwrap().sub(&l0.scale(2.0)).unwrap().scale(1.0 / (eps * eps));
            e1.push(l1_distance(&first, &m));
            e2.push(l1_distance(&second, &d2));
        }
        let o1 = (e1[0] / e1[1]).log2();
        let o2 = (e2[0] / e2[1]).log2();
        pass &= o1 >= 1.8 && o2 >= 1.8;
        parts.push(format!("f={name}: M order {o1:.2} ({:.1e}), ∂²L order {o2:.2} ({:.1e})", e1[1], e2[1]));

        let terms = seven_term_decomposition(&p, f).unwrap();
        let mut sum = terms[0].clone();
        for t in &terms[1..] {
            sum = sum.add(t).unwrap();
        }
        let gap = l1_distance(&sum, &d2) / d2.l1_norm().unwrap().max(1.0);
        pass &= gap <= 1e-10;
        parts.push(format!("seven-term gap {gap:.1e}"));
    }
    outcome(pass, parts.join("; "))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 14] = [
        ("fixed point at α=0", c1_fixed_point),
        ("density envelope", c2_envelope),
        ("source-term cancellation", c3_cancellation),
        ("exact α=0 source", c4_exact_source),
        ("linear response vs finite differences", c5_response_vs_fd),
        ("susceptibility identity", c6_susceptibility),
        ("series duality", c7_duality),
        ("cone invariance", c8_cone_invariance),
        ("appendix factors", c9_omegas),
        ("neutral orbit", c10_neutral_orbit),
        ("distortion", c11_distortion),
        ("correlation decay", c12_correlations),
        ("oracle triangle", c13_oracle_triangle),
        ("∂_α operator consistency", c14_operator_derivatives),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if only.is_some_and(|o| o != i + 1) {
            continue;
        }
        let t = Instant::now();
        let o = run();
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("{tag} criterion {:>2} {name} [{:.1}s]: {}", i + 1, t.elapsed().as_secs_f64(), o.detail);
        if !o.pass {
            failed += 1;
        }
    }
    println!("acceptance: {} criteria, {failed} failed", only.map_or(criteria.len(), |_| 1));
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
