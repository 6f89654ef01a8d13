use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::TransferOperator;
use crate::error::{invalid, Error, Result};
use crate::grid::{GridFunction, Mesh};
use crate::map::MapParams;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityMethod {
    /// `f_{k+1} = L f_k` from `f_0 ≡ 1`.
    Power,
    /// Power iteration of the first-return operator `(I − N)^{-1} R`, where
    /// `R` is the right-branch part of `L`.  Same fixed point as `Power`,
    /// but the neutral fixed point no longer slows the iteration down.
    #[default]
    Induced,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityOptions {
    pub tol: f64,
    pub max_iter: Option<usize>,
    pub method: DensityMethod,
}

impl Default for DensityOptions {
    fn default() -> Self {
        DensityOptions { tol: 1e-13, max_iter: None, method: DensityMethod::Induced }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DensityRecord {
    pub params: MapParams,
    /// Stored with singular exponent α.
    pub density: GridFunction,
    pub iterations: usize,
    /// L¹ distance between the last two normalized iterates.
    pub residual: f64,
    /// `‖L ρ − ρ‖₁` for the returned density.
    pub fixed_point_residual: f64,
    pub normalization: f64,
    pub converged: bool,
    pub method: DensityMethod,
    pub tol: f64,
}

impl DensityRecord {
    pub fn require_converged(&self) -> Result<()> {
        if self.converged {
            Ok(())
        } else {
            Err(Error::NotConverged { iterations: self.iterations, residual: self.residual })
        }
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        self.density.mesh()
    }

    /// `(min, max)` of `x^α ρ(x)` over the nodes.
    pub fn envelope(&self) -> (f64, f64) {
        let u = self.density.with_exponent(self.params.alpha());
        u.values().iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// `∫ ψ dμ_α` for a closed-form ψ with jump points `breaks`.
    pub fn expectation(&self, psi: &dyn Fn(f64) -> f64, breaks: &[f64]) -> Result<f64> {
        self.density.integrate_against(psi, breaks)
    }
}

/// Iteration cap scaling like `tol^{α/(α−1)}`, clamped to `[1000, 10⁶]`.
pub fn default_max_iter(alpha: f64, tol: f64) -> usize {
    if alpha <= 0.0 {
        return 1000;
    }
    let k = tol.powf(alpha / (alpha - 1.0)) * 10.0;
    if k.is_finite() {
        (k as usize).clamp(1000, 1_000_000)
    } else {
        1_000_000
    }
}

fn check(p: &MapParams, mesh: &Mesh, tol: f64) -> Result<()> {
    if !(tol > 0.0) {
        return Err(invalid("density tolerance must be positive"));
    }
    if (mesh.spec().alpha - p.alpha()).abs() > 0.05 {
        return Err(Error::MeshMismatch(format!(
            "mesh built for alpha {} used at alpha {}",
            mesh.spec().alpha,
            p.alpha()
        )));
    }
    Ok(())
}

/// Power iteration `f_{k+1} = L_α f_k / ∫ L_α f_k` from `f_0 ≡ 1`.
///
/// Non-convergence is reported through `converged = false`, never hidden.
pub fn compute_density(p: &MapParams, mesh: &Arc<Mesh>, tol: f64, max_iter: usize) -> Result<DensityRecord> {
    check(p, mesh, tol)?;
    let op = TransferOperator::new(p, mesh, p.alpha());
    iterate(&op, tol, max_iter, DensityMethod::Power)
}

/// Invariant density through the first-return operator.
pub fn solve_density(p: &MapParams, mesh: &Arc<Mesh>, tol: f64, max_iter: usize) -> Result<DensityRecord> {
    check(p, mesh, tol)?;
    let op = TransferOperator::new(p, mesh, p.alpha());
    iterate(&op, tol, max_iter, DensityMethod::Induced)
}

pub fn density(p: &MapParams, mesh: &Arc<Mesh>, opts: &DensityOptions) -> Result<DensityRecord> {
    let max_iter = opts.max_iter.unwrap_or(match opts.method {
        DensityMethod::Power => default_max_iter(p.alpha(), opts.tol),
        DensityMethod::Induced => 10_000,
    });
    match opts.method {
        DensityMethod::Power => compute_density(p, mesh, opts.tol, max_iter),
        DensityMethod::Induced => solve_density(p, mesh, opts.tol, max_iter),
    }
}

fn iterate(op: &TransferOperator, tol: f64, max_iter: usize, method: DensityMethod) -> Result<DensityRecord> {
    let mesh = op.mesh().clone();
    let alpha = op.params().alpha();
    let w = mesh.integration_weights(alpha)?;
    let mut u: Vec<f64> = mesh.nodes().iter().map(|x| x.powf(alpha)).collect();
    let mut v = vec![0.0; u.len()];
    let mut r = vec![0.0; u.len()];
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        match method {
            DensityMethod::Power => op.apply_values(&u, &mut v),
            DensityMethod::Induced => {
                op.apply_right_values(&u, &mut r);
                op.solve_unit_lower(&r, &mut v);
            }
        }
        iterations += 1;
        let mass: f64 = w.iter().zip(&v).map(|(a, b)| a * b).sum();
        if !(mass.is_finite() && mass > 0.0) {
            return Err(Error::Divergent(format!("density iterate lost its mass ({mass})")));
        }
        for x in v.iter_mut() {
            *x /= mass;
        }
        residual = w.iter().zip(u.iter().zip(&v)).map(|(a, (b, c))| a * (b - c).abs()).sum();
        std::mem::swap(&mut u, &mut v);
        if residual <= tol {
            converged = true;
            break;
        }
    }
    op.apply_values(&u, &mut v);
    let fixed_point_residual = w.iter().zip(u.iter().zip(&v)).map(|(a, (b, c))| a * (b - c).abs()).sum();
    let normalization = w.iter().zip(&u).map(|(a, b)| a * b).sum();
    let density = GridFunction::new(mesh, alpha, u)?;
    Ok(DensityRecord {
        params: *op.params(),
        density,
        iterations,
        residual,
        fixed_point_residual,
        normalization,
        converged,
        method,
        tol,
    })
}
