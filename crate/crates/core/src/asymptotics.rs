//! Neutral-orbit asymptotics, distortion along the orbit, decay of
//! correlations and Birkhoff averages.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::map::MapParams;
use crate::observable::Observable;
use crate::orbit::{stream_rng, Orbit};
use crate::par::{map_indexed, Exec};
use crate::stats::{bootstrap_slope, line_fit, mean_and_se, power_fit, LineFit};
use crate::transfer::{DensityRecord, TransferOperator};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OrbitStats {
    pub alpha: f64,
    pub ell_max: usize,
    /// `x_ℓ = g_α^ℓ(1)` for `ℓ = 0..=ell_max`.
    pub x_ell: Vec<f64>,
    /// Slope of `log x_ℓ` against `log ℓ` over `[ell_max/10, ell_max]`.
    pub fitted_exponent: Option<f64>,
    pub upper_ok: bool,
    /// `min_ℓ (bound − x_ℓ)/bound` over `ℓ ≥ 1`.
    pub upper_margin: f64,
    /// Largest `c` with `x_ℓ ≥ c (2^α α)^{-1/α} ℓ^{-1/α}` for all `ℓ ≥ 1`.
    pub lower_c: Option<f64>,
    pub lower_ok: bool,
}

impl OrbitStats {
    /// `2^{1/α²+1/α} ℓ^{-1/α}`.
    pub fn upper_bound(alpha: f64, ell: usize) -> f64 {
        if alpha == 0.0 {
            return f64::INFINITY;
        }
        let e = 1.0 / alpha;
        (e * e + e).exp2() * (ell as f64).powf(-e)
    }

    pub fn lower_profile(alpha: f64, ell: usize) -> f64 {
        (alpha.exp2() * alpha * ell as f64).powf(-1.0 / alpha)
    }
}

pub fn neutral_orbit(p: &MapParams, ell_max: usize) -> Result<OrbitStats> {
    if ell_max < 1 {
        return Err(invalid("ell_max must be at least 1"));
    }
    let alpha = p.alpha();
    let mut x_ell = Vec::with_capacity(ell_max + 1);
    let mut x = 1.0;
    x_ell.push(x);
    for _ in 0..ell_max {
        x = p.g(x);
        x_ell.push(x);
    }

    let mut upper_margin = f64::INFINITY;
    let mut lower_c = f64::INFINITY;
    for (ell, &x) in x_ell.iter().enumerate().skip(1) {
        let b = OrbitStats::upper_bound(alpha, ell);
        if b.is_finite() {
            upper_margin = upper_margin.min((b - x) / b);
        }
        if alpha > 0.0 {
            lower_c = lower_c.min(x / OrbitStats::lower_profile(alpha, ell));
        }
    }
    let fitted_exponent = if alpha > 0.0 && ell_max >= 20 {
        let ks: Vec<f64> = (ell_max / 10..=ell_max).map(|l| l as f64).collect();
        let v: Vec<f64> = (ell_max / 10..=ell_max).map(|l| x_ell[l]).collect();
        power_fit(&ks, &v).map(|f| f.slope)
    } else {
        None
    };
    let lower_c = (alpha > 0.0).then_some(lower_c);
    Ok(OrbitStats {
        alpha,
        ell_max,
        x_ell,
        fitted_exponent,
        upper_ok: upper_margin >= 0.0,
        upper_margin,
        lower_ok: lower_c.is_none_or(|c| c > 0.0),
        lower_c,
    })
}

/// `λ_m(x_ℓ) = 1/(T_α^m)′(x_{ℓ+m})`, accumulated as `−Σ log₂ T_α′`.
pub fn contraction_factor(p: &MapParams, ell: usize, m: usize) -> Result<f64> {
    if ell < 1 {
        return Err(invalid("contraction factor needs ℓ ≥ 1"));
    }
    let mut x = 1.0;
    for _ in 0..ell {
        x = p.g(x);
    }
    let mut log = 0.0;
    for _ in 0..m {
        x = p.g(x);
        log -= p.left_deriv(x, 1).log2();
    }
    Ok(log.exp2())
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DistortionPoint {
    pub ell: usize,
    pub m: usize,
    pub lambda: f64,
    /// `λ_m (1 + m/ℓ)^{1+1/α}`.
    pub scaled: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DistortionGrid {
    pub alpha: f64,
    pub points: Vec<DistortionPoint>,
    /// `max scaled`, the fitted envelope constant.
    pub c_fit: f64,
    /// `max scaled / min scaled`.
    pub spread: f64,
}

pub fn distortion_grid(p: &MapParams, ells: &[usize], ms: &[usize]) -> Result<DistortionGrid> {
    let alpha = p.alpha();
    if alpha == 0.0 {
        return Err(invalid("distortion envelope needs α > 0"));
    }
    let mut points = Vec::new();
    for &ell in ells {
        for &m in ms {
            let lambda = contraction_factor(p, ell, m)?;
            let scaled = lambda * (1.0 + m as f64 / ell as f64).powf(1.0 + 1.0 / alpha);
            points.push(DistortionPoint { ell, m, lambda, scaled });
        }
    }
    let hi = points.iter().map(|q| q.scaled).fold(f64::NEG_INFINITY, f64::max);
    let lo = points.iter().map(|q| q.scaled).fold(f64::INFINITY, f64::min);
    Ok(DistortionGrid { alpha, points, c_fit: hi, spread: hi / lo })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationMethod {
    Operator,
    MonteCarlo,
}

/// How `φ` is made `μ_α`-mean-zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Centering {
    /// `φ − ∫φ dμ_α`.
    Constant,
    /// `φ − c φ²` with `c = ∫φ dμ_α / ∫φ² dμ_α`, keeping the support of `φ`.
    SupportPreserving,
}

impl Centering {
    /// Support-preserving for observables that vanish near 0.
    pub fn for_observable(phi: &Observable) -> Centering {
        if phi.vanishes_near_zero() {
            Centering::SupportPreserving
        } else {
            Centering::Constant
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DecayFit {
    /// Slope of `log|C_n|` against `log n` (or against `n` for geometric fits).
    pub exponent: f64,
    pub ci: Option<(f64, f64)>,
    pub r2: f64,
    pub n_lo: usize,
    pub n_hi: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorrelationCurve {
    pub alpha: f64,
    pub psi: String,
    pub phi: String,
    pub method: CorrelationMethod,
    pub centering: Centering,
    /// `C_n` for `n = 0..=N`.
    pub values: Vec<f64>,
    pub std_errors: Option<Vec<f64>>,
    /// Power-law fit on `[N/2, N]`.
    pub fit: Option<DecayFit>,
    /// Whether the fitted exponent respects the expected rate: at most
    /// `−1/α + 0.5` when φ vanishes near 0, else at most `1 − 1/α + 0.3`.
    /// `None` at α = 0 or without a fit.
    pub rate_ok: Option<bool>,
}

fn rate_ok(alpha: f64, phi: &Observable, fit: Option<&DecayFit>) -> Option<bool> {
    if alpha == 0.0 {
        return None;
    }
    let e = fit?.exponent;
    let bound = if phi.vanishes_near_zero() { -1.0 / alpha + 0.5 } else { 1.0 - 1.0 / alpha + 0.3 };
    Some(e <= bound)
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct McOptions {
    pub n_orbits: usize,
    pub orbit_len: usize,
    pub burn_in: usize,
    pub seed: u64,
}

impl Default for McOptions {
    fn default() -> Self {
        McOptions { n_orbits: 64, orbit_len: 100_000, burn_in: 10_000, seed: 0xc0ffee }
    }
}

/// The centred observable as `(a, c)` with `φ̃ = φ − a − c φ²`.
pub fn centering_coefficients(d: &DensityRecord, phi: &Observable, centering: Centering) -> Result<(f64, f64)> {
    if let Observable::Const { .. } = phi {
        return Ok((phi.eval(0.5), 0.0));
    }
    let br = phi.breaks();
    let m1 = d.expectation(&|x| phi.eval(x), &br)?;
    match centering {
        Centering::Constant => Ok((m1, 0.0)),
        Centering::SupportPreserving => {
            let m2 = d.expectation(&|x| phi.eval(x).powi(2), &br)?;
            if !(m2 > 0.0) {
                return Err(invalid("observable vanishes μ-almost everywhere"));
            }
            Ok((0.0, m1 / m2))
        }
    }
}

/// `C_n = ∫ ψ L_α^n(φ̃ ρ_α) dx` for `n = 0..=n_max`.
pub fn correlations_operator(
    p: &MapParams,
    d: &DensityRecord,
    psi: &Observable,
    phi: &Observable,
    n_max: usize,
    centering: Centering,
) -> Result<Vec<f64>> {
    psi.validate()?;
    phi.validate()?;
    if d.params.alpha() != p.alpha() {
        return Err(invalid("density belongs to a different α"));
    }
    let rho = &d.density;
    // centred with the grid quadrature, so that φ̃ρ has no component along ρ on the mesh
    let mass = rho.integrate()?;
    let m1 = rho.mul_fn(|x| phi.eval(x)).integrate()? / mass;
    let (a, c) = match centering {
        Centering::Constant => (m1, 0.0),
        Centering::SupportPreserving => {
            let m2 = rho.mul_fn(|x| phi.eval(x).powi(2)).integrate()? / mass;
            if !(m2 > 0.0) {
                return Err(invalid("observable vanishes μ-almost everywhere"));
            }
            (0.0, m1 / m2)
        }
    };
    let mut f = match phi {
        Observable::Const { .. } => rho.scale(0.0),
        _ => rho.mul_fn(|x| {
            let v = phi.eval(x);
            v - a - c * v * v
        }),
    };
    let op = TransferOperator::new(p, d.mesh(), rho.exponent());
    let pb = psi.breaks();
    let psi_f = |x: f64| psi.eval(x);
    let mut out = Vec::with_capacity(n_max + 1);
    for n in 0..=n_max {
        if n > 0 {
            f = op.apply(&f)?;
            // L conserves ∫f; the mesh interpolant of a kinked φ leaks O(h²) per step
            let leak = f.integrate()? / mass;
            f = f.axpby(1.0, rho, -leak)?;
        }
        out.push(f.integrate_against(&psi_f, &pb)?);
    }
    Ok(out)
}

struct OrbitCov {
    /// `Cov_n(ψ, φ)` and `Cov_n(ψ, φ²)` with this orbit's means.
    c1: Vec<f64>,
    c2: Vec<f64>,
    m1: f64,
    m2: f64,
}

/// Per-orbit covariance estimates `C_n`, centred with that orbit's means.
/// With support-preserving centring, `φ̃ = φ − cφ²` uses the pooled `c`.
pub fn correlations_monte_carlo(
    p: &MapParams,
    psi: &Observable,
    phi: &Observable,
    n_max: usize,
    mc: &McOptions,
    centering: Centering,
    exec: Exec,
) -> Result<(Vec<f64>, Vec<f64>)> {
    psi.validate()?;
    phi.validate()?;
    if mc.n_orbits < 2 || mc.orbit_len <= n_max {
        return Err(invalid("Monte Carlo correlations need ≥ 2 orbits longer than the lag range"));
    }
    let second = centering == Centering::SupportPreserving;
    let w = n_max + 1;
    let per_orbit = map_indexed(exec, mc.n_orbits, |j| {
        let mut o = Orbit::stratified(p, j, mc.n_orbits, stream_rng(mc.seed, j as u64));
        for _ in 0..mc.burn_in {
            o.step();
        }
        let mut ring = vec![0.0; w];
        let (mut x1, mut x2) = (vec![0.0; w], vec![0.0; w]);
        let mut count = vec![0.0; w];
        let (mut sp, mut s1, mut s2) = (0.0, 0.0, 0.0);
        for t in 0..mc.orbit_len {
            let x = o.x();
            let (a, b) = (psi.eval(x), phi.eval(x));
            ring[t % w] = b;
            for lag in 0..w.min(t + 1) {
                let f = ring[(t - lag) % w];
                x1[lag] += a * f;
                if second {
                    x2[lag] += a * f * f;
                }
                count[lag] += 1.0;
            }
            sp += a;
            s1 += b;
            s2 += b * b;
            o.step();
        }
        let n = mc.orbit_len as f64;
        let (mp, m1, m2) = (sp / n, s1 / n, s2 / n);
        OrbitCov {
            c1: (0..w).map(|l| x1[l] / count[l] - mp * m1).collect(),
            c2: (0..w).map(|l| x2[l] / count[l] - mp * m2).collect(),
            m1,
            m2,
        }
    });
    let c = if second {
        let m1: f64 = per_orbit.iter().map(|o| o.m1).sum();
        let m2: f64 = per_orbit.iter().map(|o| o.m2).sum();
        if !(m2 > 0.0) {
            return Err(invalid("observable vanishes along every orbit"));
        }
        m1 / m2
    } else {
        0.0
    };
    let mut mean = Vec::with_capacity(w);
    let mut se = Vec::with_capacity(w);
    for lag in 0..w {
        let v: Vec<f64> = per_orbit.iter().map(|o| o.c1[lag] - c * o.c2[lag]).collect();
        let (m, e) = mean_and_se(&v);
        mean.push(m);
        se.push(e);
    }
    Ok((mean, se))
}

/// Power-law fit of `|C_n|` on `[N/2, N]` with a bootstrap interval.
pub fn fit_decay(values: &[f64]) -> Option<DecayFit> {
    let n_hi = values.len().checked_sub(1)?;
    let n_lo = (n_hi / 2).max(1);
    let (x, y): (Vec<f64>, Vec<f64>) = (n_lo..=n_hi)
        .filter(|&n| values[n] != 0.0)
        .map(|n| ((n as f64).ln(), values[n].abs().ln()))
        .unzip();
    let f = line_fit(&x, &y)?;
    let ci = bootstrap_slope(&x, &y, 1000, 17);
    Some(DecayFit { exponent: f.slope, ci, r2: f.r2, n_lo, n_hi })
}

/// Geometric fit `log|C_n| ≈ a + r n` on the lags with `|C_n| > floor`.
pub fn fit_geometric(values: &[f64], floor: f64) -> Option<LineFit> {
    let (x, y): (Vec<f64>, Vec<f64>) = values
        .iter()
        .enumerate()
        .skip(1)
        .take_while(|(_, v)| v.abs() > floor)
        .map(|(n, v)| (n as f64, v.abs().ln()))
        .unzip();
    line_fit(&x, &y)
}

pub fn correlation_decay(
    p: &MapParams,
    d: &DensityRecord,
    psi: &Observable,
    phi: &Observable,
    n_max: usize,
    method: CorrelationMethod,
    mc: &McOptions,
) -> Result<CorrelationCurve> {
    let centering = Centering::for_observable(phi);
    let (values, std_errors) = match method {
        CorrelationMethod::Operator => (correlations_operator(p, d, psi, phi, n_max, centering)?, None),
        CorrelationMethod::MonteCarlo => {
            let (v, e) = correlations_monte_carlo(p, psi, phi, n_max, mc, centering, Exec::default())?;
            (v, Some(e))
        }
    };
    if values.iter().all(|v| *v == 0.0) {
        return Err(Error::InvalidInput("degenerate observables: all correlations vanish".into()));
    }
    let fit = fit_decay(&values);
    let rate_ok = rate_ok(p.alpha(), phi, fit.as_ref());
    Ok(CorrelationCurve {
        alpha: p.alpha(),
        psi: psi.id(),
        phi: phi.id(),
        method,
        centering,
        fit,
        rate_ok,
        values,
        std_errors,
    })
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct BirkhoffResult {
    pub mean: f64,
    pub std_error: f64,
    pub n_orbits: usize,
    pub batches: usize,
    pub samples: u64,
}

pub fn birkhoff_average(
    p: &MapParams,
    psi: &Observable,
    n_orbits: usize,
    orbit_len: usize,
    burn_in: usize,
    seed: u64,
) -> Result<BirkhoffResult> {
    birkhoff_average_with(Exec::default(), p, psi, n_orbits, orbit_len, burn_in, seed)
}

/// Orbit `j` draws from stream `j` of `seed`; the error is the standard
/// error of at least 32 equal batch means.
pub fn birkhoff_average_with(
    exec: Exec,
    p: &MapParams,
    psi: &Observable,
    n_orbits: usize,
    orbit_len: usize,
    burn_in: usize,
    seed: u64,
) -> Result<BirkhoffResult> {
    psi.validate()?;
    if n_orbits == 0 || orbit_len <= burn_in {
        return Err(invalid("Birkhoff average needs n_orbits ≥ 1 and orbit_len > burn_in"));
    }
    let kept = orbit_len - burn_in;
    let per = 32usize.div_ceil(n_orbits).min(kept);
    let batch_len = kept / per;
    let batches = map_indexed(exec, n_orbits, |j| {
        let mut o = Orbit::stratified(p, j, n_orbits, stream_rng(seed, j as u64));
        for _ in 0..burn_in {
            o.step();
        }
        let mut out = Vec::with_capacity(per);
        for _ in 0..per {
            let mut s = 0.0;
            for _ in 0..batch_len {
                s += psi.eval(o.x());
                o.step();
            }
            out.push(s / batch_len as f64);
        }
        out
    });
    let flat: Vec<f64> = batches.into_iter().flatten().collect();
    let (mean, se) = mean_and_se(&flat);
    Ok(BirkhoffResult {
        mean,
        std_error: se,
        n_orbits,
        batches: flat.len(),
        samples: (flat.len() * batch_len) as u64,
    })
}

/// `∫ ψ ρ_α dx` by the density's quadrature.
pub fn density_expectation(d: &DensityRecord, psi: &Observable) -> Result<f64> {
    d.expectation(&|x| psi.eval(x), &psi.breaks())
}
