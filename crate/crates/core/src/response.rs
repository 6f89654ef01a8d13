//! Linear response of `α ↦ ∫ψ dμ_α`: the source term, the backward and
//! forward series, the susceptibility form and a finite-difference oracle.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::{dot, GridFunction, Mesh};
use crate::map::MapParams;
use crate::observable::Observable;
use crate::orbit::{stream_rng, Orbit};
use crate::par::{map_indexed, Exec};
use crate::stats::{mean_and_se, power_fit};
use crate::stencil::GAUSS6;
use crate::transfer::{density, DensityMethod, DensityOptions, DensityRecord, TransferOperator};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseMethod {
    SeriesBackward,
    SeriesForward,
    Susceptibility,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResponseResult {
    pub alpha: f64,
    pub observable_id: String,
    /// Estimate of `d/dα ∫ψ dμ_α`.
    pub value: f64,
    /// `t_k = ∫ ψ̃ L^k Y dx` with ψ̃ = ψ − ∫ψ dμ_α.
    pub terms: Vec<f64>,
    pub k_used: usize,
    /// Magnitude of the fitted power-law remainder (an error bar, not added to `value`).
    pub tail_estimate: f64,
    /// Fitted `r` in `|t_k| ~ k^{-r}`, when the fit was possible.
    pub decay_exponent: Option<f64>,
    /// Per-term sampling error (forward series only).
    pub term_errors: Option<Vec<f64>>,
    /// Sampling error of `value` (forward series only).
    pub std_error: Option<f64>,
    pub method: ResponseMethod,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SeriesOptions {
    pub k_max: usize,
    /// Stop once the fitted tail is below this.
    pub tol: f64,
    pub min_terms: usize,
}

impl Default for SeriesOptions {
    fn default() -> Self {
        SeriesOptions { k_max: 20_000, tol: 1e-10, min_terms: 32 }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ForwardOptions {
    pub k_max: usize,
    /// Sample points per replicate (stratified over [0, 1]).
    pub samples: usize,
    pub replicates: usize,
    pub seed: u64,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions { k_max: 60, samples: 1 << 15, replicates: 32, seed: 0x5eed }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SusceptibilityOptions {
    /// Cylinder depth summed exactly; deeper terms come from the backward series.
    pub depth: usize,
    pub series: SeriesOptions,
}

impl Default for SusceptibilityOptions {
    fn default() -> Self {
        SusceptibilityOptions { depth: 14, series: SeriesOptions::default() }
    }
}

fn check_density(p: &MapParams, d: &DensityRecord) -> Result<()> {
    d.require_converged()?;
    if d.params.alpha() != p.alpha() {
        return Err(invalid(format!("density computed for alpha {} used at alpha {}", d.params.alpha(), p.alpha())));
    }
    Ok(())
}

/// `W = X_α · N_α ρ_α`, stored with exponent 0.
pub fn source_potential(p: &MapParams, d: &DensityRecord) -> Result<GridFunction> {
    check_density(p, d)?;
    let a = p.alpha();
    let op = TransferOperator::new(p, d.mesh(), a);
    let nr = op.apply_n(&d.density)?;
    let x = d.mesh().nodes();
    let u = (0..x.len()).map(|i| op.fields()[i].x * x[i].powf(-a) * nr.values()[i]).collect();
    GridFunction::new(d.mesh().clone(), 0.0, u)
}

/// `Y_α = (X_α N_α ρ_α)′ = X′_α N_α ρ_α + X_α (N_α ρ_α)′`, stored with exponent 0.
pub fn response_source(p: &MapParams, d: &DensityRecord) -> Result<GridFunction> {
    check_density(p, d)?;
    let a = p.alpha();
    let op = TransferOperator::new(p, d.mesh(), a);
    let nr = op.apply_n(&d.density)?;
    let dn = nr.differentiate();
    let x = d.mesh().nodes();
    let u = (0..x.len())
        .map(|i| {
            let f = &op.fields()[i];
            x[i].powf(-a) * (f.x1 * nr.values()[i] + f.x / x[i] * dn.values()[i])
        })
        .collect();
    GridFunction::new(d.mesh().clone(), 0.0, u)
}

/// Quadrature weights for `∫ (ψ − ∫ψ dμ) f dx` with `f` stored at exponent 0.
fn centered_weights(d: &DensityRecord, psi: &Observable) -> Result<(Vec<f64>, f64)> {
    psi.validate()?;
    let breaks = psi.breaks();
    let mean = centered_mean(d, psi)?;
    let w = d.mesh().quadrature_weights(0.0, &|x| psi.eval(x) - mean, &breaks)?;
    Ok((w, mean))
}

fn centered_mean(d: &DensityRecord, psi: &Observable) -> Result<f64> {
    match psi {
        Observable::Const { c } => Ok(*c),
        _ => d.expectation(&|x| psi.eval(x), &psi.breaks()),
    }
}

struct Tail {
    magnitude: f64,
    exponent: Option<f64>,
}

/// Power-law remainder `Σ_{k ≥ K} |t_k|` fitted on the last third of the terms.
fn fit_tail(terms: &[f64]) -> Tail {
    let k = terms.len();
    let peak = terms.iter().fold(0.0f64, |m, t| m.max(t.abs()));
    if peak == 0.0 {
        return Tail { magnitude: 0.0, exponent: None };
    }
    // terms at the rounding floor carry no decay information
    let floor = 1e-14 * peak;
    let recent = &terms[k.saturating_sub(8)..];
    if recent.iter().all(|t| t.abs() <= floor) {
        return Tail { magnitude: recent.iter().map(|t| t.abs()).sum(), exponent: None };
    }
    let lo = (2 * k / 3).max(1);
    let ks: Vec<f64> = (lo..k).map(|i| i as f64).collect();
    let Some(fit) = power_fit(&ks, &terms[lo..k]) else {
        return Tail { magnitude: f64::INFINITY, exponent: None };
    };
    let r = -fit.slope;
    let magnitude = if r > 1.0 {
        fit.intercept.exp() * (k as f64 - 0.5).powf(1.0 - r) / (r - 1.0)
    } else {
        f64::INFINITY
    };
    Tail { magnitude, exponent: Some(r) }
}

/// The largest term of the last third is below half the largest term overall.
fn decaying(terms: &[f64]) -> bool {
    let k = terms.len();
    if k < 3 {
        return true;
    }
    let peak = terms.iter().fold(0.0f64, |m, t| m.max(t.abs()));
    let late = terms[2 * k / 3..].iter().fold(0.0f64, |m, t| m.max(t.abs()));
    peak == 0.0 || late < 0.5 * peak
}

/// `−Σ_k ∫ ψ L_α^k Y_α dx`, pushing `Y` forward with the grid operator.
pub fn response_series(p: &MapParams, d: &DensityRecord, psi: &Observable, opts: &SeriesOptions) -> Result<ResponseResult> {
    let y = response_source(p, d)?;
    backward_terms(p, d, &y, psi, opts)
}

fn backward_terms(
    p: &MapParams,
    d: &DensityRecord,
    y: &GridFunction,
    psi: &Observable,
    opts: &SeriesOptions,
) -> Result<ResponseResult> {
    if opts.k_max == 0 {
        return Err(invalid("series needs at least one term"));
    }
    let (w, _) = centered_weights(d, psi)?;
    let op = TransferOperator::new(p, d.mesh(), 0.0);
    let mut u = y.values().to_vec();
    let mut next = vec![0.0; u.len()];
    let mut terms = Vec::new();
    let mut tail = Tail { magnitude: f64::INFINITY, exponent: None };
    for k in 0..opts.k_max {
        terms.push(dot(&w, &u));
        let n = k + 1;
        if n >= opts.min_terms && (n % 16 == 0 || n == opts.k_max) {
            tail = fit_tail(&terms);
            if tail.magnitude <= opts.tol {
                break;
            }
        }
        if n < opts.k_max {
            op.apply_values(&u, &mut next);
            std::mem::swap(&mut u, &mut next);
        }
    }
    if terms.len() < opts.min_terms {
        tail = fit_tail(&terms);
    }
    if !decaying(&terms) {
        return Err(Error::Divergent(format!("response terms do not decay over {} terms", terms.len())));
    }
    Ok(ResponseResult {
        alpha: p.alpha(),
        observable_id: psi.id(),
        value: 0.0 - terms.iter().sum::<f64>(),
        k_used: terms.len(),
        terms,
        tail_estimate: tail.magnitude,
        decay_exponent: tail.exponent,
        term_errors: None,
        std_error: None,
        method: ResponseMethod::SeriesBackward,
    })
}

/// `−Σ_k ∫ (ψ∘T_α^k) Y_α dx` by stratified sampling of orbits.
///
/// Each replicate draws one point per stratum of `[0, 1]` and follows its
/// orbit for `k_max` steps; the replicate spread gives the error bars.
pub fn response_series_forward(
    p: &MapParams,
    d: &DensityRecord,
    psi: &Observable,
    opts: &ForwardOptions,
) -> Result<ResponseResult> {
    response_series_forward_with(p, d, psi, opts, Exec::default())
}

pub fn response_series_forward_with(
    p: &MapParams,
    d: &DensityRecord,
    psi: &Observable,
    opts: &ForwardOptions,
    exec: Exec,
) -> Result<ResponseResult> {
    if opts.k_max == 0 || opts.samples == 0 || opts.replicates < 2 {
        return Err(invalid("forward series needs k_max ≥ 1, samples ≥ 1 and at least two replicates"));
    }
    psi.validate()?;
    let y = response_source(p, d)?;
    let mean = centered_mean(d, psi)?;
    let n = opts.samples;
    let kk = opts.k_max;
    let per_rep: Vec<Vec<f64>> = (0..opts.replicates)
        .map(|r| {
            let chunks = map_indexed(exec, n.div_ceil(1024), |c| {
                let mut acc = vec![0.0; kk];
                for j in c * 1024..((c + 1) * 1024).min(n) {
                    let stream = (r * n + j) as u64;
                    let mut o = Orbit::stratified(p, j, n, stream_rng(opts.seed, stream));
                    let yv = y.interpolate(o.x().max(f64::MIN_POSITIVE));
                    for a in acc.iter_mut() {
                        *a += yv * (psi.eval(o.x()) - mean);
                        o.step();
                    }
                }
                acc
            });
            let mut t = vec![0.0; kk];
            for c in chunks {
                for (a, b) in t.iter_mut().zip(c) {
                    *a += b;
                }
            }
            t.iter_mut().for_each(|v| *v /= n as f64);
            t
        })
        .collect();
    let mut terms = vec![0.0; kk];
    let mut errs = vec![0.0; kk];
    for k in 0..kk {
        let col: Vec<f64> = per_rep.iter().map(|t| t[k]).collect();
        (terms[k], errs[k]) = mean_and_se(&col);
    }
    let sums: Vec<f64> = per_rep.iter().map(|t| -t.iter().sum::<f64>()).collect();
    let (value, se) = mean_and_se(&sums);
    let tail = fit_tail(&terms);
    Ok(ResponseResult {
        alpha: p.alpha(),
        observable_id: psi.id(),
        value,
        k_used: kk,
        terms,
        tail_estimate: tail.magnitude,
        decay_exponent: tail.exponent,
        term_errors: Some(errs),
        std_error: Some(se),
        method: ResponseMethod::SeriesForward,
    })
}

/// Gauss nodes on `[0, 1]`, geometrically refined towards 0.
fn graded_rule() -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    let mut panels = vec![(0.0, 2f64.powi(-30))];
    for m in (0..30).rev() {
        panels.push((2f64.powi(-m - 1), 2f64.powi(-m)));
    }
    for (a, b) in panels {
        for &(t, w) in GAUSS6.iter() {
            out.push((a + (b - a) * t, (b - a) * w));
        }
    }
    out
}

fn cylinder_integral(w: &GridFunction, dpsi: &[f64], pts: &[f64], right: f64) -> f64 {
    let wr = w.interpolate(right.max(f64::MIN_POSITIVE));
    pts.iter().zip(dpsi).map(|(&x, &dw)| dw * (w.interpolate(x.max(f64::MIN_POSITIVE)) - wr)).sum()
}

/// Depth-k contributions `σ_k = Σ_I ∫ψ′(y)[W(h_I y) − W(h_I 1)] dy`
/// for all cylinders `I` below the branch prefix `h`.
#[allow(clippy::too_many_arguments)]
fn cylinder_terms(
    p: &MapParams,
    w: &GridFunction,
    dpsi: &[f64],
    pts: Vec<f64>,
    right: f64,
    depth: usize,
    max_depth: usize,
    out: &mut [f64],
) {
    out[depth] += cylinder_integral(w, dpsi, &pts, right);
    if depth == max_depth {
        return;
    }
    let left: Vec<f64> = pts.iter().map(|&x| p.g(x)).collect();
    cylinder_terms(p, w, dpsi, left, p.g(right), depth + 1, max_depth, out);
    let rt: Vec<f64> = pts.iter().map(|&x| 0.5 * (x + 1.0)).collect();
    cylinder_terms(p, w, dpsi, rt, 0.5 * (right + 1.0), depth + 1, max_depth, out);
}

/// `Ψ(z) = Σ_k z^k ∫ (ψ∘T^k)′ X_α N_α ρ_α dx` for continuously differentiable ψ.
///
/// `(ψ∘T^k)′` includes the jumps of `ψ∘T^k` at cylinder endpoints when
/// `ψ(0) ≠ ψ(1)`.  Depths up to `opts.depth` are summed cylinder by
/// cylinder; the remaining terms are `−t_k` from the backward series.
pub fn susceptibility(
    p: &MapParams,
    d: &DensityRecord,
    psi: &Observable,
    z: f64,
    opts: &SusceptibilityOptions,
) -> Result<ResponseResult> {
    if !(z.abs() <= 1.0) {
        return Err(invalid(format!("susceptibility needs |z| ≤ 1, got {z}")));
    }
    psi.validate()?;
    if !psi.is_smooth() {
        return Err(invalid(format!("observable {psi} has no continuous derivative")));
    }
    let wpot = source_potential(p, d)?;
    let rule = graded_rule();
    let pts: Vec<f64> = rule.iter().map(|r| r.0).collect();
    let dpsi: Vec<f64> = rule.iter().map(|&(y, wt)| wt * psi.derivative(y).unwrap()).collect();
    let depth = opts.depth;

    // levels above `split` are summed directly; below it, one task per prefix
    let split = depth.min(6);
    let mut sigma = vec![0.0; depth + 1];
    shallow_levels(p, &wpot, &dpsi, pts.clone(), 1.0, 0, split, &mut sigma);
    let deep: Vec<Vec<f64>> = map_indexed(Exec::default(), 1usize << split, |b| {
        let (mut xs, mut right) = (pts.clone(), 1.0);
        for level in 0..split {
            if (b >> (split - 1 - level)) & 1 == 0 {
                xs.iter_mut().for_each(|x| *x = p.g(*x));
                right = p.g(right);
            } else {
                xs.iter_mut().for_each(|x| *x = 0.5 * (*x + 1.0));
                right = 0.5 * (right + 1.0);
            }
        }
        let mut out = vec![0.0; depth + 1];
        cylinder_terms(p, &wpot, &dpsi, xs, right, split, depth, &mut out);
        out
    });
    for v in &deep {
        for l in split..=depth {
            sigma[l] += v[l];
        }
    }

    let so = SeriesOptions { k_max: opts.series.k_max.max(depth + 2), ..opts.series };
    let back = response_series(p, d, psi, &so)?;
    let mut terms: Vec<f64> = sigma.clone();
    terms.extend(back.terms.iter().skip(depth + 1).map(|t| -t));
    let value = terms.iter().enumerate().map(|(k, t)| z.powi(k as i32) * t).sum();
    Ok(ResponseResult {
        alpha: p.alpha(),
        observable_id: psi.id(),
        value,
        k_used: terms.len(),
        terms,
        tail_estimate: back.tail_estimate,
        decay_exponent: back.decay_exponent,
        term_errors: None,
        std_error: None,
        method: ResponseMethod::Susceptibility,
    })
}

#[allow(clippy::too_many_arguments)]
fn shallow_levels(
    p: &MapParams,
    w: &GridFunction,
    dpsi: &[f64],
    pts: Vec<f64>,
    right: f64,
    depth: usize,
    max_depth: usize,
    out: &mut [f64],
) {
    if depth == max_depth {
        return;
    }
    out[depth] += cylinder_integral(w, dpsi, &pts, right);
    let left: Vec<f64> = pts.iter().map(|&x| p.g(x)).collect();
    shallow_levels(p, w, dpsi, left, p.g(right), depth + 1, max_depth, out);
    let rt: Vec<f64> = pts.iter().map(|&x| 0.5 * (x + 1.0)).collect();
    shallow_levels(p, w, dpsi, rt, 0.5 * (right + 1.0), depth + 1, max_depth, out);
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FdResponse {
    pub alpha: f64,
    pub observable_id: String,
    pub eps: f64,
    /// Difference quotient at `eps`.
    pub value: f64,
    /// Difference quotient at `eps / 2`.
    pub value_half: f64,
    /// Richardson combination of the pair.
    pub extrapolated: f64,
    pub one_sided: bool,
}

/// `(∫ψ dμ_{α+ε} − ∫ψ dμ_{α−ε}) / 2ε`, one-sided when `α < ε`.
pub fn finite_difference_response(
    p: &MapParams,
    psi: &Observable,
    eps: f64,
    mesh: &Arc<Mesh>,
    tol: f64,
) -> Result<FdResponse> {
    psi.validate()?;
    let a = p.alpha();
    if !(eps > 0.0) || a + eps >= 1.0 {
        return Err(invalid(format!("step {eps} is not admissible at alpha {a}")));
    }
    let one_sided = a < eps;
    let opts = DensityOptions { tol, max_iter: None, method: DensityMethod::Induced };
    let breaks = psi.breaks();
    let mean_at = |b: f64| -> Result<f64> {
        let q = MapParams::new(b)?;
        let d = density(&q, mesh, &opts)?;
        d.require_converged()?;
        d.expectation(&|x| psi.eval(x), &breaks)
    };
    let quotient = |h: f64, base: Option<f64>| -> Result<f64> {
        match base {
            Some(m0) => Ok((mean_at(a + h)? - m0) / h),
            None => Ok((mean_at(a + h)? - mean_at(a - h)?) / (2.0 * h)),
        }
    };
    let base = if one_sided { Some(mean_at(a)?) } else { None };
    let value = quotient(eps, base)?;
    let value_half = quotient(0.5 * eps, base)?;
    let extrapolated = if one_sided { 2.0 * value_half - value } else { (4.0 * value_half - value) / 3.0 };
    Ok(FdResponse { alpha: a, observable_id: psi.id(), eps, value, value_half, extrapolated, one_sided })
}
