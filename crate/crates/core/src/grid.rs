//! Meshes on `(0, 1]` graded towards the neutral fixed point, and functions
//! stored as `x^{-s} u(x)` with `u` sampled at the nodes.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{domain, invalid, Error, Result};
use crate::map::MapParams;
use crate::stencil::{fornberg, lagrange, GAUSS6};

pub const DEFAULT_X_MIN: f64 = 1e-10;
pub const DEFAULT_ORBIT_LEN: usize = 64;

/// Build parameters of a mesh.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeshSpec {
    pub alpha: f64,
    pub size: usize,
    pub orbit_len: usize,
    pub x_min: f64,
}

#[derive(Clone, Copy, Debug)]
struct Stencil5 {
    start: usize,
    w: [[f64; 5]; 3],
}

#[derive(Debug)]
pub struct Mesh {
    spec: MeshSpec,
    grading_exponent: f64,
    nodes: Vec<f64>,
    orbit: Vec<usize>,
    fd: Vec<Stencil5>,
    hash: String,
    weight_cache: Mutex<HashMap<u64, Arc<Vec<f64>>>>,
}

#[derive(Serialize, Deserialize)]
struct MeshRepr {
    spec: MeshSpec,
    grading_exponent: f64,
    nodes: Vec<f64>,
    orbit: Vec<usize>,
}

impl Serialize for Mesh {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        MeshRepr {
            spec: self.spec,
            grading_exponent: self.grading_exponent,
            nodes: self.nodes.clone(),
            orbit: self.orbit.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Mesh {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = MeshRepr::deserialize(d)?;
        Mesh::from_parts(r.spec, r.grading_exponent, r.nodes, r.orbit).map_err(serde::de::Error::custom)
    }
}

/// Largest orbit length `ℓ ≤ cap` with `g^ℓ(1) ≥ 100 x_min`.
pub fn orbit_len_for(p: &MapParams, x_min: f64, cap: usize) -> usize {
    let mut x = 1.0;
    for l in 0..cap {
        x = p.g(x);
        if x < 100.0 * x_min {
            return l;
        }
    }
    cap
}

impl Mesh {
    /// Mesh with the default orbit length (clipped so the orbit stays above `x_min`).
    pub fn standard(p: &MapParams, n: usize) -> Result<Arc<Mesh>> {
        let l = orbit_len_for(p, DEFAULT_X_MIN, DEFAULT_ORBIT_LEN);
        Mesh::build(p, n, l, DEFAULT_X_MIN)
    }

    pub fn build(p: &MapParams, n: usize, orbit_len: usize, x_min: f64) -> Result<Arc<Mesh>> {
        if n < 64 {
            return Err(invalid(format!("mesh size must be at least 64, got {n}")));
        }
        if !(x_min > 0.0 && x_min < 1e-2) {
            return Err(invalid(format!("x_min must lie in (0, 1e-2), got {x_min}")));
        }
        let alpha = p.alpha();
        let gamma = (2.0 / (1.0 - alpha)).max(2.0);

        let mut orbit = vec![1.0];
        for _ in 0..orbit_len {
            let next = p.g(*orbit.last().unwrap());
            orbit.push(next);
        }
        if *orbit.last().unwrap() <= x_min {
            return Err(invalid(format!(
                "x_min {x_min} must lie below the last neutral-orbit node {}",
                orbit.last().unwrap()
            )));
        }

        let ratio = (200.0 / n as f64).min(0.25);
        let i_g = ((gamma / ratio).ceil() as usize).clamp(1, n);
        let x_g = (i_g as f64 / n as f64).powf(gamma);
        let mut bulk: Vec<f64> = (i_g..=n).map(|i| (i as f64 / n as f64).powf(gamma)).collect();
        let mut x = x_g / (1.0 + ratio);
        while x > x_min * (1.0 + 0.5 * ratio) {
            bulk.push(x);
            x /= 1.0 + ratio;
        }
        bulk.retain(|&v| v > x_min && v < 1.0);
        bulk.sort_by(|a, b| a.partial_cmp(b).unwrap());

        let mut priority = orbit.clone();
        priority.push(x_min);
        priority.sort_by(|a, b| a.partial_cmp(b).unwrap());
        priority.dedup();

        let mut keep = Vec::with_capacity(bulk.len());
        for (j, &v) in bulk.iter().enumerate() {
            let prev = if j > 0 { v - bulk[j - 1] } else { f64::INFINITY };
            let next = if j + 1 < bulk.len() { bulk[j + 1] - v } else { f64::INFINITY };
            let h = prev.min(next).min(v * ratio);
            let k = priority.partition_point(|&q| q < v);
            let near = [k.checked_sub(1), Some(k)]
                .into_iter()
                .flatten()
                .filter_map(|i| priority.get(i))
                .any(|&q| (q - v).abs() < 0.3 * h);
            if !near {
                keep.push(v);
            }
        }
        keep.extend_from_slice(&priority);
        keep.sort_by(|a, b| a.partial_cmp(b).unwrap());
        keep.dedup();

        let orbit_idx = orbit
            .iter()
            .map(|&v| keep.partition_point(|&q| q < v))
            .collect();
        let spec = MeshSpec { alpha, size: n, orbit_len, x_min };
        Ok(Arc::new(Mesh::from_parts(spec, gamma, keep, orbit_idx)?))
    }

    fn from_parts(spec: MeshSpec, grading_exponent: f64, nodes: Vec<f64>, orbit: Vec<usize>) -> Result<Mesh> {
        if nodes.len() < 5 {
            return Err(invalid("mesh needs at least five nodes"));
        }
        if nodes.windows(2).any(|w| !(w[0] < w[1])) || nodes[0] <= 0.0 || *nodes.last().unwrap() != 1.0 {
            return Err(invalid("mesh nodes must increase strictly from x_min > 0 to 1"));
        }
        let n = nodes.len();
        let fd = (0..n)
            .map(|i| {
                let start = i.saturating_sub(2).min(n - 5);
                let w = fornberg(nodes[i], &nodes[start..start + 5], 3);
                let mut out = [[0.0; 5]; 3];
                for k in 0..3 {
                    out[k].copy_from_slice(&w[k + 1]);
                }
                Stencil5 { start, w: out }
            })
            .collect();
        let mut hasher = Sha256::new();
        for v in &nodes {
            hasher.update(v.to_le_bytes());
        }
        let hash = hex::encode(hasher.finalize());
        Ok(Mesh { spec, grading_exponent, nodes, orbit, fd, hash, weight_cache: Mutex::new(HashMap::new()) })
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn spec(&self) -> MeshSpec {
        self.spec
    }

    pub fn x_min(&self) -> f64 {
        self.nodes[0]
    }

    pub fn grading_exponent(&self) -> f64 {
        self.grading_exponent
    }

    /// Node indices of the neutral orbit `g^ℓ(1)`, `ℓ = 0..=L`.
    pub fn orbit_indices(&self) -> &[usize] {
        &self.orbit
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn same_as(&self, other: &Mesh) -> bool {
        std::ptr::eq(self, other) || self.hash == other.hash
    }

    /// Index `j` with `x_j <= x < x_{j+1}`, clamped to the last cell.
    pub fn cell_of(&self, x: f64) -> usize {
        let k = self.nodes.partition_point(|&q| q <= x);
        k.saturating_sub(1).min(self.nodes.len() - 2)
    }

    /// Index of the node nearest to `x`.
    pub fn nearest(&self, x: f64) -> usize {
        let j = self.cell_of(x);
        if (x - self.nodes[j]).abs() <= (self.nodes[j + 1] - x).abs() {
            j
        } else {
            j + 1
        }
    }

    /// Start index of the four-node interpolation stencil for cell `j`.
    pub fn cubic_start(&self, j: usize) -> usize {
        j.saturating_sub(1).min(self.nodes.len() - 4)
    }

    /// Weights `w` with `∫_0^1 x^{-s} ψ(x) u(x) dx ≈ Σ w_i u_i`.
    ///
    /// Each cell uses the local cubic interpolant of `u` and a six-point
    /// Gauss rule, split at the supplied breakpoints of `ψ`.  Below `x_min`
    /// `u` is frozen at its first value and `ψ` at its value in the middle
    /// of the tail, and the `x^{-s}` moment is integrated exactly.
    pub fn quadrature_weights(&self, s: f64, psi: &dyn Fn(f64) -> f64, breaks: &[f64]) -> Result<Vec<f64>> {
        if !(s < 1.0) {
            return Err(domain(format!("x^-{s} is not integrable at 0")));
        }
        let x = &self.nodes;
        let n = x.len();
        let mut w = vec![0.0; n];
        let x0 = x[0];
        w[0] += psi(0.5 * x0) * x0.powf(1.0 - s) / (1.0 - s);
        let mut cuts = Vec::with_capacity(4);
        for j in 0..n - 1 {
            let (a, b) = (x[j], x[j + 1]);
            cuts.clear();
            cuts.push(a);
            cuts.extend(breaks.iter().copied().filter(|&c| c > a && c < b));
            cuts.push(b);
            let st = self.cubic_start(j);
            let xs = &x[st..st + 4];
            for seg in cuts.windows(2) {
                let h = seg[1] - seg[0];
                for &(t, gw) in GAUSS6.iter() {
                    let z = seg[0] + h * t;
                    let f = h * gw * z.powf(-s) * psi(z);
                    if f == 0.0 {
                        continue;
                    }
                    let l = lagrange(z, xs);
                    for k in 0..4 {
                        w[st + k] += f * l[k];
                    }
                }
            }
        }
        Ok(w)
    }

    /// Plain integration weights for exponent `s`, cached.
    pub fn integration_weights(&self, s: f64) -> Result<Arc<Vec<f64>>> {
        let key = s.to_bits();
        if let Some(w) = self.weight_cache.lock().unwrap().get(&key) {
            return Ok(w.clone());
        }
        let w = Arc::new(self.quadrature_weights(s, &|_| 1.0, &[])?);
        self.weight_cache.lock().unwrap().insert(key, w.clone());
        Ok(w)
    }

    /// Discrete derivative of order `m ∈ 1..=3` of nodal values `u` at node `i`.
    #[inline]
    pub fn node_derivative(&self, u: &[f64], i: usize, m: usize) -> f64 {
        let st = self.fd[i];
        let ui = u[i];
        let mut acc = 0.0;
        for k in 0..5 {
            acc += st.w[m - 1][k] * (u[st.start + k] - ui);
        }
        acc
    }
}

/// A function `x^{-s} u(x)` on a mesh.
#[derive(Clone, Debug)]
pub struct GridFunction {
    mesh: Arc<Mesh>,
    s: f64,
    u: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct GridRepr {
    mesh: Mesh,
    s: f64,
    values: Vec<f64>,
    #[serde(default)]
    meta: serde_json::Value,
}

impl Serialize for GridFunction {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = ser.serialize_struct("GridFunction", 4)?;
        st.serialize_field("mesh", &*self.mesh)?;
        st.serialize_field("s", &self.s)?;
        st.serialize_field("values", &self.u)?;
        st.serialize_field("meta", &serde_json::json!({ "mesh_hash": self.mesh.hash() }))?;
        st.end()
    }
}

impl<'de> Deserialize<'de> for GridFunction {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = GridRepr::deserialize(d)?;
        GridFunction::new(Arc::new(r.mesh), r.s, r.values).map_err(serde::de::Error::custom)
    }
}

impl GridFunction {
    pub fn new(mesh: Arc<Mesh>, s: f64, u: Vec<f64>) -> Result<Self> {
        if u.len() != mesh.len() {
            return Err(Error::MeshMismatch(format!("{} values for {} nodes", u.len(), mesh.len())));
        }
        if !(s >= 0.0) {
            return Err(invalid(format!("singular exponent must be non-negative, got {s}")));
        }
        if let Some(i) = u.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("non-finite value at node {i}")));
        }
        Ok(GridFunction { mesh, s, u })
    }

    pub(crate) fn from_raw(mesh: Arc<Mesh>, s: f64, u: Vec<f64>) -> Self {
        debug_assert_eq!(u.len(), mesh.len());
        GridFunction { mesh, s, u }
    }

    /// Samples `f` at the nodes and stores `x^s f(x)`.
    pub fn from_fn(mesh: &Arc<Mesh>, s: f64, f: impl Fn(f64) -> f64) -> Self {
        let u = mesh.nodes().iter().map(|&x| x.powf(s) * f(x)).collect();
        GridFunction { mesh: mesh.clone(), s, u }
    }

    pub fn constant(mesh: &Arc<Mesh>, c: f64) -> Self {
        GridFunction { mesh: mesh.clone(), s: 0.0, u: vec![c; mesh.len()] }
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    pub fn exponent(&self) -> f64 {
        self.s
    }

    /// Stored values `u`.
    pub fn values(&self) -> &[f64] {
        &self.u
    }

    pub fn into_values(self) -> Vec<f64> {
        self.u
    }

    /// Function values `x^{-s} u` at the nodes.
    pub fn node_values(&self) -> Vec<f64> {
        self.mesh.nodes().iter().zip(&self.u).map(|(&x, &u)| u * x.powf(-self.s)).collect()
    }

    pub fn check_mesh(&self, other: &GridFunction) -> Result<()> {
        if self.mesh.same_as(&other.mesh) {
            Ok(())
        } else {
            Err(Error::MeshMismatch("grid functions live on different meshes".into()))
        }
    }

    /// Same function with stored exponent `s2`.
    pub fn with_exponent(&self, s2: f64) -> GridFunction {
        if s2 == self.s {
            return self.clone();
        }
        let d = s2 - self.s;
        let u = self.mesh.nodes().iter().zip(&self.u).map(|(&x, &u)| u * x.powf(d)).collect();
        GridFunction { mesh: self.mesh.clone(), s: s2, u }
    }

    pub fn scale(&self, c: f64) -> GridFunction {
        GridFunction { mesh: self.mesh.clone(), s: self.s, u: self.u.iter().map(|v| c * v).collect() }
    }

    /// `a·self + b·other`, expressed with the exponent of `self`.
    pub fn axpby(&self, a: f64, other: &GridFunction, b: f64) -> Result<GridFunction> {
        self.check_mesh(other)?;
        let o = other.with_exponent(self.s);
        let u = self.u.iter().zip(&o.u).map(|(x, y)| a * x + b * y).collect();
        Ok(GridFunction { mesh: self.mesh.clone(), s: self.s, u })
    }

    pub fn add(&self, other: &GridFunction) -> Result<GridFunction> {
        self.axpby(1.0, other, 1.0)
    }

    pub fn sub(&self, other: &GridFunction) -> Result<GridFunction> {
        self.axpby(1.0, other, -1.0)
    }

    /// Pointwise product; exponents add.
    pub fn mul(&self, other: &GridFunction) -> Result<GridFunction> {
        self.check_mesh(other)?;
        let u = self.u.iter().zip(&other.u).map(|(x, y)| x * y).collect();
        Ok(GridFunction { mesh: self.mesh.clone(), s: self.s + other.s, u })
    }

    /// Multiply by a closed-form function of `x`, keeping the exponent.
    pub fn mul_fn(&self, f: impl Fn(f64) -> f64) -> GridFunction {
        let u = self.mesh.nodes().iter().zip(&self.u).map(|(&x, &u)| u * f(x)).collect();
        GridFunction { mesh: self.mesh.clone(), s: self.s, u }
    }

    pub fn integrate(&self) -> Result<f64> {
        let w = self.mesh.integration_weights(self.s)?;
        Ok(dot(&w, &self.u))
    }

    /// `∫ ψ f dx` for a closed-form `ψ` with jump points `breaks`.
    pub fn integrate_against(&self, psi: &dyn Fn(f64) -> f64, breaks: &[f64]) -> Result<f64> {
        let w = self.mesh.quadrature_weights(self.s, psi, breaks)?;
        Ok(dot(&w, &self.u))
    }

    pub fn l1_norm(&self) -> Result<f64> {
        let w = self.mesh.integration_weights(self.s)?;
        Ok(w.iter().zip(&self.u).map(|(w, u)| w * u.abs()).sum())
    }

    /// Stored values of the m-th derivative, which carries exponent `s + m`.
    ///
    /// `(x^{-s}u)^{(m)} = x^{-s-m} Σ_k C(m,k) (-s)_{m-k} x^k u^{(k)}` with
    /// `(-s)_j` the falling factorial.
    pub fn derivative(&self, m: usize) -> GridFunction {
        assert!((1..=3).contains(&m), "derivative order must be 1..=3");
        let s = self.s;
        let mesh = &self.mesh;
        let x = mesh.nodes();
        let falling = |j: usize| (0..j).map(|i| -s - i as f64).product::<f64>();
        let binom = [[1.0, 0.0, 0.0, 0.0], [1.0, 1.0, 0.0, 0.0], [1.0, 2.0, 1.0, 0.0], [1.0, 3.0, 3.0, 1.0]];
        let coef: Vec<f64> = (0..=m).map(|k| binom[m][k] * falling(m - k)).collect();
        let u = (0..x.len())
            .map(|i| {
                let mut acc = coef[0] * self.u[i];
                let mut xp = 1.0;
                for k in 1..=m {
                    xp *= x[i];
                    if coef[k] != 0.0 {
                        acc += coef[k] * xp * mesh.node_derivative(&self.u, i, k);
                    }
                }
                acc
            })
            .collect();
        GridFunction { mesh: mesh.clone(), s: s + m as f64, u }
    }

    pub fn differentiate(&self) -> GridFunction {
        self.derivative(1)
    }

    /// Monotone cubic Hermite interpolation of `u`, times `x^{-s}`.
    pub fn evaluate(&self, x: f64) -> Result<f64> {
        if !(x > 0.0 && x <= 1.0) {
            return Err(domain(format!("evaluation point {x} outside (0, 1]")));
        }
        let nodes = self.mesh.nodes();
        if x <= nodes[0] {
            return Ok(self.u[0] * x.powf(-self.s));
        }
        let j = self.mesh.cell_of(x);
        let (x0, x1) = (nodes[j], nodes[j + 1]);
        let h = x1 - x0;
        let (u0, u1) = (self.u[j], self.u[j + 1]);
        let d0 = self.pchip_slope(j);
        let d1 = self.pchip_slope(j + 1);
        let t = (x - x0) / h;
        let (t2, t3) = (t * t, t * t * t);
        let v = (2.0 * t3 - 3.0 * t2 + 1.0) * u0
            + (t3 - 2.0 * t2 + t) * h * d0
            + (-2.0 * t3 + 3.0 * t2) * u1
            + (t3 - t2) * h * d1;
        Ok(v * x.powf(-self.s))
    }

    fn pchip_slope(&self, i: usize) -> f64 {
        let x = self.mesh.nodes();
        let n = x.len();
        let delta = |j: usize| (self.u[j + 1] - self.u[j]) / (x[j + 1] - x[j]);
        if i == 0 || i == n - 1 {
            let (hk, hn, d_in, d_out) = if i == 0 {
                (x[1] - x[0], x[2] - x[1], delta(0), delta(1))
            } else {
                (x[n - 1] - x[n - 2], x[n - 2] - x[n - 3], delta(n - 2), delta(n - 3))
            };
            let d = ((2.0 * hk + hn) * d_in - hk * d_out) / (hk + hn);
            if d.signum() != d_in.signum() {
                0.0
            } else if d_in.signum() != d_out.signum() && d.abs() > 3.0 * d_in.abs() {
                3.0 * d_in
            } else {
                d
            }
        } else {
            let (dl, dr) = (delta(i - 1), delta(i));
            if dl * dr <= 0.0 {
                return 0.0;
            }
            let (hl, hr) = (x[i] - x[i - 1], x[i + 1] - x[i]);
            let w1 = 2.0 * hr + hl;
            let w2 = hr + 2.0 * hl;
            (w1 + w2) / (w1 / dl + w2 / dr)
        }
    }

    /// Local cubic Lagrange interpolation of `u`, times `x^{-s}`; constant `u` below `x_min`.
    pub fn interpolate(&self, x: f64) -> f64 {
        let nodes = self.mesh.nodes();
        if x <= nodes[0] {
            return self.u[0] * x.powf(-self.s);
        }
        let j = self.mesh.cell_of(x);
        let st = self.mesh.cubic_start(j);
        let l = lagrange(x, &nodes[st..st + 4]);
        let v: f64 = (0..4).map(|k| l[k] * self.u[st + k]).sum();
        v * x.powf(-self.s)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mesh(a: f64, n: usize) -> Arc<Mesh> {
        Mesh::standard(&MapParams::new(a).unwrap(), n).unwrap()
    }

    #[test]
    fn mesh_structure() {
        for a in [0.0, 0.3, 0.75] {
            let m = mesh(a, 512);
            let x = m.nodes();
            assert_eq!(*x.last().unwrap(), 1.0);
            assert_eq!(x[0], DEFAULT_X_MIN);
            assert!(x.windows(2).all(|w| w[0] < w[1]));
            assert!(x.contains(&0.5));
            let p = MapParams::new(a).unwrap();
            let mut y = 1.0;
            for &i in m.orbit_indices() {
                assert_eq!(x[i], y);
                y = p.g(y);
            }
        }
    }

    #[test]
    fn orbit_nodes_at_alpha_zero_are_dyadic() {
        let m = mesh(0.0, 256);
        for (l, &i) in m.orbit_indices().iter().enumerate() {
            assert_eq!(m.nodes()[i], 0.5f64.powi(l as i32));
        }
    }

    #[test]
    fn orbit_node_respects_upper_bound() {
        let p = MapParams::new(0.5).unwrap();
        let m = Mesh::build(&p, 256, 100, 1e-10).unwrap();
        let x100 = m.nodes()[m.orbit_indices()[100]];
        assert!(x100 <= 64.0 / 1e4);
    }

    #[test]
    fn build_rejects_bad_sizes() {
        let p = MapParams::new(0.0).unwrap();
        assert!(Mesh::build(&p, 32, 10, 1e-10).is_err());
        assert!(Mesh::build(&p, 128, 40, 1e-10).is_err());
    }

    #[test]
    fn integrates_simple_functions() {
        let m = mesh(0.4, 1024);
        assert!((GridFunction::constant(&m, 1.0).integrate().unwrap() - 1.0).abs() < 1e-13);
        let f = GridFunction::new(m.clone(), 0.5, vec![1.0; m.len()]).unwrap();
        assert!((f.integrate().unwrap() - 2.0).abs() < 1e-12);
        let f = GridFunction::from_fn(&m, 0.0, |x| x);
        assert!((f.integrate().unwrap() - 0.5).abs() < 1e-12);
        let f = GridFunction::new(m.clone(), 1.0, vec![1.0; m.len()]).unwrap();
        assert!(f.integrate().is_err());
    }

    #[test]
    fn integrates_against_indicator() {
        let m = mesh(0.25, 512);
        let f = GridFunction::from_fn(&m, 0.25, |x| x.powf(-0.25));
        let ind = |x: f64| if (0.3..=0.7).contains(&x) { 1.0 } else { 0.0 };
        let v = f.integrate_against(&ind, &[0.3, 0.7]).unwrap();
        let exact = (0.7f64.powf(0.75) - 0.3f64.powf(0.75)) / 0.75;
        assert!((v - exact).abs() < 1e-12);
    }

    #[test]
    fn derivatives_of_power_laws() {
        let m = mesh(0.3, 1024);
        let c = GridFunction::constant(&m, 3.0).differentiate();
        assert!(c.values().iter().all(|v| *v == 0.0));
        let f = GridFunction::new(m.clone(), 0.3, vec![1.0; m.len()]).unwrap();
        let d = f.differentiate();
        for (x, v) in m.nodes().iter().zip(d.node_values()) {
            assert!((v + 0.3 * x.powf(-1.3)).abs() <= 1e-14 * x.powf(-1.3));
        }
        let sq = GridFunction::from_fn(&m, 0.0, |x| x * x).differentiate();
        let err = m.nodes().iter().zip(sq.node_values()).map(|(x, v)| (v - 2.0 * x).abs()).fold(0.0, f64::max);
        assert!(err < 1e-10);
    }

    #[test]
    fn higher_derivatives_of_smooth_function() {
        let m = mesh(0.3, 2048);
        let f = GridFunction::from_fn(&m, 0.2, |x| x.powf(-0.2) * (1.0 + x).ln());
        let exact = |x: f64, k: usize| {
            let h = 1e-3 * x.min(0.5);
            let g = |z: f64| z.powf(-0.2) * (1.0 + z).ln();
            match k {
                1 => (g(x + h) - g(x - h)) / (2.0 * h),
                2 => (g(x + h) - 2.0 * g(x) + g(x - h)) / (h * h),
                _ => unreachable!(),
            }
        };
        for k in 1..=2 {
            let d = f.derivative(k).node_values();
            for (i, &x) in m.nodes().iter().enumerate() {
                if x < 1e-6 || x > 0.99 {
                    continue;
                }
                let e = exact(x, k);
                assert!((d[i] - e).abs() < 1e-3 * e.abs(), "k={k} x={x}: {} vs {e}", d[i]);
            }
        }
    }

    #[test]
    fn evaluate_is_exact_at_nodes_and_on_lines() {
        let m = mesh(0.5, 256);
        let f = GridFunction::from_fn(&m, 0.0, |x| 2.0 * x + 1.0);
        for w in m.nodes().windows(2) {
            let mid = 0.5 * (w[0] + w[1]);
            assert!((f.evaluate(mid).unwrap() - (2.0 * mid + 1.0)).abs() < 1e-12);
        }
        let g = GridFunction::from_fn(&m, 0.5, |x| x.powf(-0.5) * (1.0 + x));
        for &x in m.nodes() {
            assert_eq!(g.evaluate(x).unwrap(), g.values()[m.nodes().partition_point(|&q| q < x)] * x.powf(-0.5));
        }
        assert!(f.evaluate(0.0).is_err());
    }

    #[test]
    fn serialization_round_trip() {
        let m = mesh(0.25, 128);
        let f = GridFunction::from_fn(&m, 0.25, |x| x.powf(-0.25) + x);
        let s = serde_json::to_string(&f).unwrap();
        let g: GridFunction = serde_json::from_str(&s).unwrap();
        assert_eq!(f.values(), g.values());
        assert_eq!(f.exponent(), g.exponent());
        assert!(f.check_mesh(&g).is_ok());
    }

    #[test]
    fn mismatched_meshes_do_not_combine() {
        let a = GridFunction::constant(&mesh(0.2, 128), 1.0);
        let b = GridFunction::constant(&mesh(0.3, 128), 1.0);
        assert!(matches!(a.add(&b), Err(Error::MeshMismatch(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn integrate_is_linear_and_positive(
            c in proptest::collection::vec(0.0f64..2.0, 3),
            s in 0.0f64..0.9,
            k in -3.0f64..3.0,
        ) {
            let m = mesh(0.3, 128);
            let f = GridFunction::from_fn(&m, s, |x| x.powf(-s) * (c[0] + c[1] * x + c[2] * x * x));
            let g = GridFunction::from_fn(&m, s, |x| x.powf(-s) * (1.0 + x).sqrt());
            let lin = f.axpby(k, &g, 1.0).unwrap().integrate().unwrap();
            let sep = k * f.integrate().unwrap() + g.integrate().unwrap();
            prop_assert!((lin - sep).abs() < 1e-12 * (1.0 + sep.abs()));
            prop_assert!(f.integrate().unwrap() >= 0.0);
        }
    }
}
