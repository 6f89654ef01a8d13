//! Transfer operators of the family on a mesh, their α-derivatives, invariant
//! densities and an Ulam discretization.

mod density;
mod ulam;

pub use density::{
    compute_density, default_max_iter, density, solve_density, DensityMethod, DensityOptions, DensityRecord,
};
pub use ulam::{build_ulam, build_ulam_with, ulam_stationary, UlamDensity, UlamOperator};

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::{GridFunction, Mesh};
use crate::map::{Fields, MapParams};
use crate::par::{fill_indexed, Exec};
use crate::stencil::{fornberg, lagrange};

/// One interpolation tap: `factor · (u_a + Σ_{k≠a} w_k (u_k − u_a))`.
#[derive(Clone, Copy, Debug)]
struct Tap {
    start: u32,
    len: u8,
    anchor: u8,
    factor: f64,
    w: [f64; 4],
}

impl Tap {
    fn new(xs: &[f64], start: usize, len: usize, y: f64, factor: f64) -> Tap {
        let mut w = [0.0; 4];
        let l = lagrange(y, &xs[start..start + len]);
        w[..len].copy_from_slice(&l);
        let anchor = (0..len).max_by(|&a, &b| w[a].abs().partial_cmp(&w[b].abs()).unwrap()).unwrap();
        Tap { start: start as u32, len: len as u8, anchor: anchor as u8, factor, w }
    }

    #[inline]
    fn eval(&self, u: &[f64]) -> f64 {
        let s = self.start as usize;
        let a = self.anchor as usize;
        let ua = u[s + a];
        let mut acc = ua;
        for k in 0..self.len as usize {
            if k != a {
                acc += self.w[k] * (u[s + k] - ua);
            }
        }
        self.factor * acc
    }

    /// Coefficient of node `j` in the expanded linear form.
    fn coefficient(&self, j: usize) -> f64 {
        let s = self.start as usize;
        if j < s || j >= s + self.len as usize {
            return 0.0;
        }
        let k = j - s;
        if k == self.anchor as usize {
            let rest: f64 = (0..self.len as usize).filter(|&m| m != k).map(|m| self.w[m]).sum();
            self.factor * (1.0 - rest)
        } else {
            self.factor * self.w[k]
        }
    }
}

/// First and second derivatives of the interpolant used by a left-branch tap.
#[derive(Clone, Copy, Debug)]
struct TapSlope {
    d1: [f64; 4],
    d2: [f64; 4],
}

/// `L_α` on a fixed mesh for functions stored with singular exponent `s`.
///
/// The left branch samples `u` through causal cubic stencils (nodes at or
/// left of the output node), so `(I − N_α)` is lower triangular.
pub struct TransferOperator {
    p: MapParams,
    mesh: Arc<Mesh>,
    s: f64,
    left: Vec<Tap>,
    right: Vec<Tap>,
    slopes: Vec<TapSlope>,
    fields: Vec<Fields>,
    exec: Exec,
}

impl TransferOperator {
    pub fn new(p: &MapParams, mesh: &Arc<Mesh>, s: f64) -> TransferOperator {
        let x = mesh.nodes();
        let n = x.len();
        let a = p.alpha();
        let sc = p.scale();
        let fields: Vec<Fields> = x.iter().map(|&xi| p.fields(xi)).collect();
        let mut left = Vec::with_capacity(n);
        let mut slopes = Vec::with_capacity(n);
        let mut right = Vec::with_capacity(n);
        for i in 0..n {
            let y = fields[i].g;
            let ya = sc * y.powf(a);
            let factor = (1.0 + ya).powf(s) / (1.0 + (1.0 + a) * ya);
            let (start, len) = if y < x[0] {
                (0, 1)
            } else {
                let j = mesh.cell_of(y).min(i.saturating_sub(1));
                let start = j.saturating_sub(1).min(i.saturating_sub(3));
                (start, (i - start + 1).min(4))
            };
            left.push(Tap::new(x, start, len, y, factor));
            let mut sl = TapSlope { d1: [0.0; 4], d2: [0.0; 4] };
            if len > 1 {
                let w = fornberg(y, &x[start..start + len], 2);
                sl.d1[..len].copy_from_slice(&w[1]);
                sl.d2[..len].copy_from_slice(&w[2]);
            }
            slopes.push(sl);

            let y2 = 0.5 * (x[i] + 1.0);
            let f2 = 0.5 * (x[i] / y2).powf(s);
            let st = mesh.cubic_start(mesh.cell_of(y2));
            right.push(Tap::new(x, st, 4, y2, f2));
        }
        TransferOperator { p: *p, mesh: mesh.clone(), s, left, right, slopes, fields, exec: Exec::default() }
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn params(&self) -> &MapParams {
        &self.p
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    pub fn exponent(&self) -> f64 {
        self.s
    }

    /// Closed-form fields `X_α`, `X′_α`, … at every node.
    pub fn fields(&self) -> &[Fields] {
        &self.fields
    }

    fn prepare(&self, f: &GridFunction) -> Result<GridFunction> {
        if !self.mesh.same_as(f.mesh()) {
            return Err(Error::MeshMismatch("operator and function live on different meshes".into()));
        }
        Ok(f.with_exponent(self.s))
    }

    pub fn apply_values(&self, u: &[f64], out: &mut [f64]) {
        fill_indexed(self.exec, out, |i| self.left[i].eval(u) + self.right[i].eval(u));
    }

    pub fn apply_n_values(&self, u: &[f64], out: &mut [f64]) {
        fill_indexed(self.exec, out, |i| self.left[i].eval(u));
    }

    pub fn apply_right_values(&self, u: &[f64], out: &mut [f64]) {
        fill_indexed(self.exec, out, |i| self.right[i].eval(u));
    }

    pub fn apply(&self, f: &GridFunction) -> Result<GridFunction> {
        let f = self.prepare(f)?;
        let mut out = vec![0.0; self.mesh.len()];
        self.apply_values(f.values(), &mut out);
        Ok(GridFunction::from_raw(self.mesh.clone(), self.s, out))
    }

    pub fn apply_n(&self, f: &GridFunction) -> Result<GridFunction> {
        let f = self.prepare(f)?;
        let mut out = vec![0.0; self.mesh.len()];
        self.apply_n_values(f.values(), &mut out);
        Ok(GridFunction::from_raw(self.mesh.clone(), self.s, out))
    }

    /// Solves `(I − N_α) z = r` by forward substitution.
    pub(crate) fn solve_unit_lower(&self, r: &[f64], z: &mut [f64]) {
        let a = self.p.alpha();
        let sc = self.p.scale();
        for i in 0..r.len() {
            let t = &self.left[i];
            let st = t.start as usize;
            let mut acc = r[i];
            let mut diag = 0.0;
            for j in st..st + t.len as usize {
                let c = t.coefficient(j);
                if j == i {
                    diag = c;
                } else {
                    acc += c * z[j];
                }
            }
            let pivot = if i == 0 && t.len == 1 {
                let ya = sc * self.fields[0].g.powf(a);
                -(self.s * ya.ln_1p() - ((1.0 + a) * ya).ln_1p()).exp_m1()
            } else {
                1.0 - diag
            };
            z[i] = acc / pivot;
        }
    }

    /// `N_α f` and its first two x-derivatives, taken through the same
    /// interpolant that defines the discrete operator.  Values are stored
    /// with exponent `s` (derivatives scaled by `x` and `x²`).
    fn n_jet(&self, u: &[f64]) -> [Vec<f64>; 3] {
        let x = self.mesh.nodes();
        let s = self.s;
        let n = x.len();
        let (mut v0, mut v1, mut v2) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for i in 0..n {
            let t = &self.left[i];
            let fl = &self.fields[i];
            let y = fl.g;
            let st = t.start as usize;
            let ut = t.eval(u) / t.factor;
            let (mut du, mut ddu) = (0.0, 0.0);
            for k in 0..t.len as usize {
                let dv = u[st + k] - u[st + t.anchor as usize];
                du += self.slopes[i].d1[k] * dv;
                ddu += self.slopes[i].d2[k] * dv;
            }
            // f̃ = y^{-s} ũ and its derivatives, all scaled by y^{s}
            let f0 = ut;
            let f1 = du - s * ut / y;
            let f2 = ddu - 2.0 * s * du / y + s * (s + 1.0) * ut / (y * y);
            let scale = (x[i] / y).powf(s);
            v0[i] = scale * fl.g1 * f0;
            v1[i] = scale * x[i] * (fl.g2 * f0 + fl.g1 * fl.g1 * f1);
            v2[i] = scale * x[i] * x[i] * (fl.g3 * f0 + 3.0 * fl.g1 * fl.g2 * f1 + fl.g1.powi(3) * f2);
        }
        [v0, v1, v2]
    }

    /// `M_α f = ∂_α L_α f = −X′_α N_α f − X_α (N_α f)′`.
    pub fn apply_m(&self, f: &GridFunction) -> Result<GridFunction> {
        let f = self.prepare(f)?;
        let [w0, w1, _] = self.n_jet(f.values());
        let x = self.mesh.nodes();
        let out = (0..x.len())
            .map(|i| {
                let fl = &self.fields[i];
                -fl.x1 * w0[i] - fl.x / x[i] * w1[i]
            })
            .collect();
        Ok(GridFunction::from_raw(self.mesh.clone(), self.s, out))
    }

    /// The seven Leibniz terms of `∂²_α L_α f`, writing `W = N_α f`:
    /// `−(∂X)′W`, `−(∂X)W′`, `X′²W`, `X′XW′`, `XX″W`, `2XX′W′`, `X²W″`.
    pub fn seven_terms(&self, f: &GridFunction) -> Result<[GridFunction; 7]> {
        let f = self.prepare(f)?;
        let [w0, w1, w2] = self.n_jet(f.values());
        let x = self.mesh.nodes();
        let n = x.len();
        let mut t: [Vec<f64>; 7] = std::array::from_fn(|_| vec![0.0; n]);
        for i in 0..n {
            let fl = &self.fields[i];
            let q = fl.x / x[i];
            t[0][i] = -fl.dx1 * w0[i];
            t[1][i] = -fl.dx / x[i] * w1[i];
            t[2][i] = fl.x1 * fl.x1 * w0[i];
            t[3][i] = fl.x1 * q * w1[i];
            t[4][i] = fl.x * fl.x2 * w0[i];
            t[5][i] = 2.0 * fl.x1 * q * w1[i];
            t[6][i] = q * q * w2[i];
        }
        Ok(t.map(|v| GridFunction::from_raw(self.mesh.clone(), self.s, v)))
    }

    /// `∂²_α L_α f = −((∂_αX) W)′ + X′(XW)′ + X(XW)″` with `W = N_α f`.
    pub fn apply_d2l(&self, f: &GridFunction) -> Result<GridFunction> {
        let f = self.prepare(f)?;
        let [w0, w1, w2] = self.n_jet(f.values());
        let x = self.mesh.nodes();
        let out = (0..x.len())
            .map(|i| {
                let fl = &self.fields[i];
                let (dw, ddw) = (w1[i] / x[i], w2[i] / (x[i] * x[i]));
                let dxw_1 = fl.dx1 * w0[i] + fl.dx * dw;
                let xw_1 = fl.x1 * w0[i] + fl.x * dw;
                let xw_2 = fl.x2 * w0[i] + 2.0 * fl.x1 * dw + fl.x * ddw;
                -dxw_1 + fl.x1 * xw_1 + fl.x * xw_2
            })
            .collect();
        Ok(GridFunction::from_raw(self.mesh.clone(), self.s, out))
    }
}

pub fn apply_l(p: &MapParams, f: &GridFunction) -> Result<GridFunction> {
    TransferOperator::new(p, f.mesh(), f.exponent()).apply(f)
}

pub fn apply_n(p: &MapParams, f: &GridFunction) -> Result<GridFunction> {
    TransferOperator::new(p, f.mesh(), f.exponent()).apply_n(f)
}

pub fn apply_m(p: &MapParams, f: &GridFunction) -> Result<GridFunction> {
    TransferOperator::new(p, f.mesh(), f.exponent()).apply_m(f)
}

pub fn apply_d2l(p: &MapParams, f: &GridFunction) -> Result<GridFunction> {
    TransferOperator::new(p, f.mesh(), f.exponent()).apply_d2l(f)
}

pub fn seven_term_decomposition(p: &MapParams, f: &GridFunction) -> Result<[GridFunction; 7]> {
    TransferOperator::new(p, f.mesh(), f.exponent()).seven_terms(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn setup(a: f64, n: usize) -> (MapParams, Arc<Mesh>) {
        let p = MapParams::new(a).unwrap();
        let m = Mesh::standard(&p, n).unwrap();
        (p, m)
    }

    #[test]
    fn constants_are_fixed_at_alpha_zero() {
        let (p, m) = setup(0.0, 256);
        let one = GridFunction::constant(&m, 1.0);
        assert!(apply_l(&p, &one).unwrap().values().iter().all(|v| *v == 1.0));
        assert!(apply_n(&p, &one).unwrap().values().iter().all(|v| *v == 0.5));
    }

    #[test]
    fn identity_function_at_alpha_zero() {
        let (p, m) = setup(0.0, 256);
        let f = GridFunction::from_fn(&m, 0.0, |x| x);
        let lf = apply_l(&p, &f).unwrap();
        // preimages below x_min see the constant extrapolation
        let x0 = m.nodes()[0];
        for (x, v) in m.nodes().iter().zip(lf.values()).filter(|(x, _)| **x >= 2.0 * x0) {
            assert!((v - (x / 2.0 + 0.25)).abs() < 1e-15, "{x}: {}", v - (x / 2.0 + 0.25));
        }
    }

    #[test]
    fn branch_decomposition_is_exact() {
        let (p, m) = setup(0.4, 512);
        let f = GridFunction::from_fn(&m, 0.4, |x| x.powf(-0.4) * (2.0 + (3.0 * x).sin()));
        let op = TransferOperator::new(&p, &m, 0.4);
        let l = op.apply(&f).unwrap();
        let nf = op.apply_n(&f).unwrap();
        let mut r = vec![0.0; m.len()];
        op.apply_right_values(f.values(), &mut r);
        for i in 0..m.len() {
            assert_eq!(l.values()[i], nf.values()[i] + r[i]);
        }
    }

    #[test]
    fn zero_maps_to_zero() {
        let (p, m) = setup(0.3, 256);
        let z = GridFunction::constant(&m, 0.0);
        assert!(apply_m(&p, &z).unwrap().values().iter().all(|v| *v == 0.0));
        assert!(apply_d2l(&p, &z).unwrap().values().iter().all(|v| *v == 0.0));
        for t in seven_term_decomposition(&p, &z).unwrap() {
            assert!(t.values().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn mass_is_conserved() {
        for a in [0.1, 0.4, 0.7] {
            let (p, m) = setup(a, 2048);
            let f = GridFunction::from_fn(&m, a, |x| x.powf(-a) * (1.0 + x * x));
            let before = f.integrate().unwrap();
            let after = apply_l(&p, &f).unwrap().integrate().unwrap();
            assert!((after - before).abs() < 1e-8, "alpha {a}: {before} -> {after}");
        }
    }

    #[test]
    fn second_term_sign_follows_the_product_rule() {
        let a = 0.3;
        let (p, m) = setup(a, 4096);
        let f = apply_l(&p, &GridFunction::constant(&m, 1.0)).unwrap();
        let eps = 1e-3;
        let op = |b: f64| TransferOperator::new(&MapParams::new(b).unwrap(), &m, 0.0);
        let up = op(a + eps).apply(&f).unwrap();
        let dn = op(a - eps).apply(&f).unwrap();
        let mid = op(a).apply(&f).unwrap();
        let fd = up.add(&dn).unwrap().sub(&mid.scale(2.0)).unwrap().scale(1.0 / (eps * eps));
        let terms = seven_term_decomposition(&p, &f).unwrap();
        let mut sum = terms[0].clone();
        for t in &terms[1..] {
            sum = sum.add(t).unwrap();
        }
        let flipped = sum.sub(&terms[1].scale(2.0)).unwrap();
        let ours = sum.sub(&fd).unwrap().l1_norm().unwrap();
        let other = flipped.sub(&fd).unwrap().l1_norm().unwrap();
        assert!(ours < 1e-6, "{ours}");
        assert!(other > 1e3 * ours, "{other} vs {ours}");
    }

    #[test]
    fn m_at_alpha_zero_on_constants() {
        let (p, m) = setup(0.0, 1024);
        let mf = apply_m(&p, &GridFunction::constant(&m, 1.0)).unwrap();
        let ln2 = std::f64::consts::LN_2;
        for (x, v) in m.nodes().iter().zip(mf.values()) {
            let exact = -(1.0 + ln2 + (x / 2.0).ln()) / 4.0;
            assert!((v - exact).abs() < 1e-13, "x={x}: {v} vs {exact}");
        }
    }

    #[test]
    fn adjoint_identity_for_piecewise_smooth_observables() {
        let (p, m) = setup(0.3, 4096);
        let f = GridFunction::from_fn(&m, 0.3, |x| x.powf(-0.3) * (1.5 - x));
        let psi = |x: f64| (2.0 * std::f64::consts::PI * x).cos();
        let lhs = f.integrate_against(&|x| psi(p.step(x)), &[0.5]).unwrap();
        let rhs = apply_l(&p, &f).unwrap().integrate_against(&psi, &[]).unwrap();
        assert!((lhs - rhs).abs() < 1e-8, "{lhs} vs {rhs}");
    }

    #[test]
    fn unit_lower_solve_inverts_identity_minus_n() {
        let (p, m) = setup(0.5, 512);
        let op = TransferOperator::new(&p, &m, 0.5);
        let z: Vec<f64> = m.nodes().iter().map(|x| 1.0 + x).collect();
        let mut nz = vec![0.0; z.len()];
        op.apply_n_values(&z, &mut nz);
        let r: Vec<f64> = z.iter().zip(&nz).map(|(a, b)| a - b).collect();
        let mut back = vec![0.0; z.len()];
        op.solve_unit_lower(&r, &mut back);
        for (a, b) in z.iter().zip(&back) {
            assert!((a - b).abs() < 1e-9 * a.abs(), "{a} vs {b}");
        }
    }

    #[test]
    fn parallel_and_sequential_agree_bitwise() {
        let (p, m) = setup(0.35, 1024);
        let f = GridFunction::from_fn(&m, 0.35, |x| x.powf(-0.35) * (1.0 + x).ln());
        let a = TransferOperator::new(&p, &m, 0.35).with_exec(Exec::Sequential).apply(&f).unwrap();
        let b = TransferOperator::new(&p, &m, 0.35).with_exec(Exec::Parallel).apply(&f).unwrap();
        assert_eq!(a.values(), b.values());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn positivity_is_preserved(c in proptest::collection::vec(0.0f64..1.0, 3), floor in 0.05f64..1.0, a in 0.0f64..0.8) {
            let (p, m) = setup(a, 128);
            let f = GridFunction::from_fn(&m, a, |x| x.powf(-a) * (floor + c[0] * x + c[1] * x * x + c[2] * (5.0 * x).sin().powi(2)));
            let lf = apply_l(&p, &f).unwrap();
            prop_assert!(lf.values().iter().all(|v| *v >= 0.0));
        }
    }
}
