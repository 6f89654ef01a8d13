//! Membership tests for the cones `C_*`, `C_{*,1}`, `C_2`, `C_3` and the
//! appendix factors `Ω₁`, `Ω₂`, `Ω₃`.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{domain, invalid, Result};
use crate::grid::{GridFunction, Mesh};
use crate::map::MapParams;
use crate::par::{map_indexed, Exec};
use crate::transfer::{DensityRecord, TransferOperator};

const EPS_M: f64 = 1e-300;
const B3_CAP: f64 = 1e6;
/// Scaled derivatives below this fraction of `|x^s φ|` are rounding noise.
const ROUNDING_FLOOR: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConeId {
    Cstar,
    Cstar1,
    C2,
    C3,
}

impl fmt::Display for ConeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConeId::Cstar => "Cstar",
            ConeId::Cstar1 => "Cstar1",
            ConeId::C2 => "C2",
            ConeId::C3 => "C3",
        })
    }
}

impl std::str::FromStr for ConeId {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cstar" | "c*" => Ok(ConeId::Cstar),
            "cstar1" | "c*1" => Ok(ConeId::Cstar1),
            "c2" => Ok(ConeId::C2),
            "c3" => Ok(ConeId::C3),
            _ => Err(invalid(format!("unknown cone '{s}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConeParams {
    pub a: f64,
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
    pub b1_bar: f64,
    pub b2_bar: f64,
    /// Whether `Ω₃ ≤ 1` holds on the y-grid for this `b3`.
    pub b3_admissible: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Margin {
    pub name: String,
    pub worst: f64,
    pub worst_node: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConeReport {
    pub cone_id: ConeId,
    pub verdict: bool,
    pub worst_margin: f64,
    pub worst_node: f64,
    pub margins: Vec<Margin>,
    /// `∫₀^{1/2} φ / m(φ)`, reported for `C_*` and `C_{*,1}`.
    pub half_mass: Option<f64>,
    pub a: Option<f64>,
}

impl ConeReport {
    pub fn half_mass_ok(&self) -> bool {
        self.half_mass.is_some_and(|h| h >= 0.5)
    }
}

/// Nodewise data of a function: `u = x^s φ`, `d_m = x^{s+m} φ^{(m)}`.
struct Jet {
    mesh: Arc<Mesh>,
    x: Vec<f64>,
    u: Vec<f64>,
    d: [Vec<f64>; 3],
    s: f64,
    start: usize,
}

impl Jet {
    fn new(f: &GridFunction, order: usize) -> Jet {
        let mesh = f.mesh();
        let x = mesh.nodes().to_vec();
        let start = x.partition_point(|&v| v < 10.0 * mesh.x_min());
        let u = f.values().to_vec();
        let mut d: [Vec<f64>; 3] = Default::default();
        for m in 1..=order {
            let mut v = f.derivative(m).into_values();
            for (di, ui) in v.iter_mut().zip(&u) {
                if di.abs() <= ROUNDING_FLOOR * ui.abs() {
                    *di = 0.0;
                }
            }
            d[m - 1] = v;
        }
        Jet { mesh: mesh.clone(), x, u, d, s: f.exponent(), start }
    }

    fn phi(&self, i: usize) -> f64 {
        self.u[i] * self.x[i].powf(-self.s)
    }
}

struct Collector {
    margins: Vec<Margin>,
}

impl Collector {
    fn new() -> Self {
        Collector { margins: Vec::new() }
    }

    /// Records `min_i (rhs − lhs)/scale` for `lhs ≤ rhs`.
    fn add(&mut self, name: &str, jet: &Jet, f: impl Fn(usize) -> (f64, f64, f64)) {
        let mut worst = f64::INFINITY;
        let mut node = f64::NAN;
        for i in jet.start..jet.x.len() {
            let (lhs, rhs, scale) = f(i);
            let m = (rhs - lhs) / scale.abs().max(EPS_M);
            if m < worst || node.is_nan() {
                worst = m;
                node = jet.x[i];
            }
        }
        self.margins.push(Margin { name: name.into(), worst, worst_node: node });
    }

    fn finish(self, cone_id: ConeId, half_mass: Option<f64>, a: Option<f64>) -> ConeReport {
        let w = self
            .margins
            .iter()
            .min_by(|a, b| a.worst.partial_cmp(&b.worst).unwrap_or(std::cmp::Ordering::Less))
            .map(|m| (m.worst, m.worst_node))
            .unwrap_or((f64::INFINITY, f64::NAN));
        ConeReport {
            cone_id,
            verdict: w.0 >= 0.0,
            worst_margin: w.0,
            worst_node: w.1,
            margins: self.margins,
            half_mass,
            a,
        }
    }
}

fn c2_margins(c: &mut Collector, j: &Jet, cp: &ConeParams) {
    c.add("positive", j, |i| (0.0, j.u[i], j.u[i]));
    c.add("slope_lower", j, |i| (cp.b1_bar * j.u[i], -j.d[0][i], -j.d[0][i]));
    c.add("slope_upper", j, |i| (-j.d[0][i], cp.b1 * j.u[i], cp.b1 * j.u[i]));
    c.add("curvature_lower", j, |i| (cp.b2_bar * j.u[i], j.d[1][i], j.d[1][i]));
    c.add("curvature_upper", j, |i| (j.d[1][i], cp.b2 * j.u[i], cp.b2 * j.u[i]));
}

/// `(b̄₁/x)φ ≤ −φ′ ≤ (b₁/x)φ` and `(b̄₂/x²)φ ≤ φ″ ≤ (b₂/x²)φ` on `[10 x_min, 1]`.
pub fn check_c2(f: &GridFunction, cp: &ConeParams) -> ConeReport {
    let j = Jet::new(f, 2);
    let mut c = Collector::new();
    c2_margins(&mut c, &j, cp);
    c.finish(ConeId::C2, None, None)
}

/// `C_2` together with `|φ‴| ≤ (b₃/x³)φ`.
pub fn check_c3(f: &GridFunction, cp: &ConeParams) -> ConeReport {
    let j = Jet::new(f, 3);
    let mut c = Collector::new();
    c2_margins(&mut c, &j, cp);
    c.add("third", &j, |i| (j.d[2][i].abs(), cp.b3 * j.u[i], cp.b3 * j.u[i]));
    c.finish(ConeId::C3, None, None)
}

fn cstar_margins(c: &mut Collector, j: &Jet, p: &MapParams, d: &DensityRecord, a: f64, mass: f64) -> Result<()> {
    if !d.mesh().same_as(&j.mesh) {
        return Err(crate::Error::MeshMismatch("cone check and density use different meshes".into()));
    }
    let rho = d.density.node_values();
    let k = p.alpha() + 1.0;
    c.add("positive", j, |i| (0.0, j.u[i], j.u[i]));
    c.add("density_bound", j, |i| (j.phi(i), 2.0 * a * rho[i] * mass, 2.0 * a * rho[i] * mass));
    c.add("slope_lower", j, |i| (-k * j.u[i], j.d[0][i], k * j.u[i]));
    c.add("monotone", j, |i| (j.d[0][i], 0.0, k * j.u[i]));
    Ok(())
}

fn half_mass(f: &GridFunction) -> Result<(f64, f64)> {
    let m = f.integrate()?;
    let h = f.integrate_against(&|x| if x <= 0.5 { 1.0 } else { 0.0 }, &[0.5])?;
    Ok((m, h / m))
}

/// `0 ≤ φ ≤ 2aρ_α m(φ)` and `−((α+1)/x)φ ≤ φ′ ≤ 0`.
pub fn check_cstar(f: &GridFunction, p: &MapParams, d: &DensityRecord, a: f64) -> Result<ConeReport> {
    let j = Jet::new(f, 1);
    let (m, h) = half_mass(f)?;
    let mut c = Collector::new();
    cstar_margins(&mut c, &j, p, d, a, m)?;
    Ok(c.finish(ConeId::Cstar, Some(h), Some(a)))
}

/// `C_*` together with `|φ′| ≤ (b₁/x)φ`.
pub fn check_cstar1(f: &GridFunction, p: &MapParams, d: &DensityRecord, a: f64, b1: f64) -> Result<ConeReport> {
    let j = Jet::new(f, 1);
    let (m, h) = half_mass(f)?;
    let mut c = Collector::new();
    cstar_margins(&mut c, &j, p, d, a, m)?;
    c.add("abs_slope", &j, |i| (j.d[0][i].abs(), b1 * j.u[i], b1 * j.u[i]));
    Ok(c.finish(ConeId::Cstar1, Some(h), Some(a)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Omegas {
    pub y: f64,
    pub omega1: f64,
    pub omega2: f64,
    pub omega3: f64,
    pub omega1_bar: f64,
    pub omega2_bar: f64,
}

/// The bracketed factors of the cone-invariance estimates at `y ∈ (0, 1/2]`.
pub fn omega_factors(p: &MapParams, y: f64, cp: &ConeParams) -> Result<Omegas> {
    if !(y > 0.0 && y <= 0.5) {
        return Err(domain(format!("omega factors need y in (0, 1/2], got {y}")));
    }
    let t = p.left_deriv(y, 0);
    let t1 = p.left_deriv(y, 1);
    let t2 = p.left_deriv(y, 2);
    let t3 = p.left_deriv(y, 3).abs();
    let t4 = p.left_deriv(y, 4).abs();
    let q = t / (y * t1);
    let omega1 = t / (cp.b1 * y * t1) * (y * t2 / t1 + cp.b1);
    // 0/0 occurs for b̄ = 0 at α = 0, where the bracket is identically 1
    let ratio = |num: f64, den: f64| if num == 0.0 { 0.0 } else { num / den };
    let omega1_bar = q * (ratio(y * t2, cp.b1_bar * t1) + 1.0);
    let inner2 = |b1: f64, b2: f64| {
        1.0 + ratio(y * y * (3.0 * b1 * t2 / (y * t1) + t3 / t1 + 3.0 * t2 * t2 / (t1 * t1)), b2)
    };
    let omega2 = q * q * inner2(cp.b1, cp.b2);
    let omega2_bar = q * q * inner2(cp.b1_bar, cp.b2_bar);
    let omega3 = q.powi(3)
        * (1.0
            + 6.0 * cp.b2 * y / (cp.b3 * t1)
            + cp.b1 * y * y / cp.b3 * (4.0 * t3 / t1 + 15.0 * t2 * t2 / (t1 * t1))
            + y.powi(3) / cp.b3
                * (t4 / t1 + 4.0 * t3 * t3 / (t1 * t1) + 6.0 * t2 * t3 / (t1 * t1) + 15.0 * t2.powi(3) / t1.powi(3)));
    Ok(Omegas { y, omega1, omega2, omega3, omega1_bar, omega2_bar })
}

/// `n` equally spaced points `(i/n)·(1/2)`, `i = 1..=n`.
pub fn y_grid(n: usize) -> Vec<f64> {
    (1..=n).map(|i| 0.5 * i as f64 / n as f64).collect()
}

pub fn omega_table(p: &MapParams, cp: &ConeParams, n: usize) -> Vec<Omegas> {
    y_grid(n).into_iter().map(|y| omega_factors(p, y, cp).unwrap()).collect()
}

impl ConeParams {
    /// The experimental regime: `b₁ = α+1`, `b₂ = 3b₁(1+α)+21`, `b̄₂ = b̄₁/10`,
    /// `b̄₁` from `L_α 1` and the `Ω̄₁ ≥ 1` condition, `b₃` the smallest grid
    /// value with `Ω₃ ≤ 1`, and `a = max(1, 1/min ρ_α)`.
    pub fn calibrated(p: &MapParams, d: &DensityRecord) -> Result<ConeParams> {
        let alpha = p.alpha();
        let b1 = alpha + 1.0;
        let b2 = 3.0 * b1 * (1.0 + alpha) + 21.0;
        let ys = y_grid(512);

        // Ω̄₁ ≥ 1 ⇔ b̄₁ ≤ y T″ T / (T′ (y T′ − T)) wherever y T′ > T
        let omega_cap = ys
            .iter()
            .map(|&y| {
                let (t, t1, t2) = (p.left_deriv(y, 0), p.left_deriv(y, 1), p.left_deriv(y, 2));
                let gap = y * t1 - t;
                if gap > 0.0 {
                    y * t2 * t / (t1 * gap)
                } else {
                    f64::INFINITY
                }
            })
            .fold(f64::INFINITY, f64::min);

        let one = GridFunction::constant(d.mesh(), 1.0);
        let l1 = TransferOperator::new(p, d.mesh(), 0.0).apply(&one)?;
        let j = Jet::new(&l1, 2);
        let (mut slope, mut curv) = (f64::INFINITY, f64::INFINITY);
        for i in j.start..j.x.len() {
            slope = slope.min(-j.d[0][i] / j.u[i]);
            curv = curv.min(j.d[1][i] / j.u[i]);
        }
        let b1_bar = (0.5 * omega_cap).min(0.5 * slope).max(0.0);
        let b2_bar = (0.1 * b1_bar).min(0.5 * curv).max(0.0);

        let rho_min = d.density.node_values().iter().fold(f64::INFINITY, |m, v| m.min(*v));
        if !(rho_min > 0.0) {
            return Err(invalid("density must be positive to calibrate the cones"));
        }
        let a = (1.0 / rho_min).max(1.0);

        let mut cp = ConeParams { a, b1, b2, b3: b1, b1_bar, b2_bar, b3_admissible: false };
        let mut b3 = b1;
        while b3 <= B3_CAP {
            cp.b3 = b3;
            if ys.iter().all(|&y| omega_factors(p, y, &cp).unwrap().omega3 <= 1.0) {
                cp.b3_admissible = true;
                break;
            }
            b3 *= 1.25;
        }
        if !cp.b3_admissible {
            cp.b3 = B3_CAP;
        }
        Ok(cp)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InvarianceStep {
    pub k: usize,
    /// `L_α^k 1` in the cone.
    pub iterate: ConeReport,
    /// `N_α L_α^k 1`, with `a` doubled for `C_*`/`C_{*,1}`.
    pub n_image: ConeReport,
}

/// Cone membership of `L_α^k 1` and `N_α L_α^k 1` for `k = 1..=k_max`.
pub fn invariance_experiment(
    p: &MapParams,
    d: &DensityRecord,
    cone: ConeId,
    cp: &ConeParams,
    k_max: usize,
) -> Result<Vec<InvarianceStep>> {
    if k_max == 0 {
        return Err(invalid("invariance experiment needs k_max ≥ 1"));
    }
    let op = TransferOperator::new(p, d.mesh(), 0.0);
    let mut iterates = Vec::with_capacity(k_max);
    let mut f = GridFunction::constant(d.mesh(), 1.0);
    for _ in 0..k_max {
        f = op.apply(&f)?;
        iterates.push(f.clone());
    }
    let check = |f: &GridFunction, a: f64| -> Result<ConeReport> {
        Ok(match cone {
            ConeId::Cstar => check_cstar(f, p, d, a)?,
            ConeId::Cstar1 => check_cstar1(f, p, d, a, cp.b1)?,
            ConeId::C2 => check_c2(f, cp),
            ConeId::C3 => check_c3(f, cp),
        })
    };
    let steps = map_indexed(Exec::default(), k_max, |i| -> Result<InvarianceStep> {
        let it = &iterates[i];
        let nf = op.apply_n(it)?;
        Ok(InvarianceStep { k: i + 1, iterate: check(it, cp.a)?, n_image: check(&nf, 2.0 * cp.a)? })
    });
    steps.into_iter().collect()
}
