use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridFunction, Mesh};
use crate::map::MapParams;
use crate::par::{map_indexed, Exec};
use crate::stencil::GAUSS6;

/// Row-stochastic Ulam matrix on the cells `[0, x_0], [x_0, x_1], …, [x_{n-2}, 1]`.
#[derive(Clone, Debug)]
pub struct UlamOperator {
    pub params: MapParams,
    edges: Vec<f64>,
    rows: Vec<Vec<(usize, f64)>>,
    cols: Vec<Vec<(usize, f64)>>,
}

/// Cell masses of a piecewise-constant density.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UlamDensity {
    pub edges: Vec<f64>,
    pub mass: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
}

pub fn build_ulam(p: &MapParams, partition: &Mesh) -> UlamOperator {
    build_ulam_with(p, partition, Exec::default())
}

pub fn build_ulam_with(p: &MapParams, partition: &Mesh, exec: Exec) -> UlamOperator {
    let mut edges = Vec::with_capacity(partition.len() + 1);
    edges.push(0.0);
    edges.extend_from_slice(partition.nodes());
    let m = edges.len() - 1;
    let left: Vec<f64> = edges.iter().map(|&b| p.g(b)).collect();
    // right-branch preimages measured from 1/2, where both are exact
    let right: Vec<f64> = edges.iter().map(|&b| 0.5 * b).collect();
    let rows = map_indexed(exec, m, |i| {
        let (a, b, pre) = if edges[i + 1] <= 0.5 {
            (edges[i], edges[i + 1], &left)
        } else {
            (edges[i] - 0.5, edges[i + 1] - 0.5, &right)
        };
        let mut j = pre.partition_point(|&q| q <= a).saturating_sub(1);
        let mut row = Vec::new();
        while j < m && pre[j] < b {
            let lo = a.max(pre[j]);
            let hi = b.min(pre[j + 1]);
            if hi > lo {
                row.push((j, (hi - lo) / (b - a)));
            }
            j += 1;
        }
        row
    });
    let mut cols = vec![Vec::new(); m];
    for (i, row) in rows.iter().enumerate() {
        for &(j, v) in row {
            cols[j].push((i, v));
        }
    }
    UlamOperator { params: *p, edges, rows, cols }
}

impl UlamOperator {
    pub fn cells(&self) -> usize {
        self.rows.len()
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.iter().map(|e| e.1).sum()).collect()
    }

    /// One step `π ↦ π P`.
    pub fn push_forward(&self, pi: &[f64], exec: Exec) -> Vec<f64> {
        map_indexed(exec, self.cols.len(), |j| self.cols[j].iter().map(|&(i, v)| pi[i] * v).sum())
    }
}

/// Stationary cell masses by power iteration from Lebesgue measure.
pub fn ulam_stationary(u: &UlamOperator, tol: f64, max_iter: usize) -> Result<UlamDensity> {
    let mut pi: Vec<f64> = u.edges.windows(2).map(|w| w[1] - w[0]).collect();
    let mut residual = f64::INFINITY;
    for it in 1..=max_iter {
        let mut next = u.push_forward(&pi, Exec::default());
        let total: f64 = next.iter().sum();
        for v in next.iter_mut() {
            *v /= total;
        }
        residual = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
        pi = next;
        if residual <= tol {
            return Ok(UlamDensity { edges: u.edges.clone(), mass: pi, iterations: it, residual });
        }
    }
    Err(Error::NotConverged { iterations: max_iter, residual })
}

impl UlamDensity {
    pub fn value(&self, j: usize) -> f64 {
        self.mass[j] / (self.edges[j + 1] - self.edges[j])
    }

    /// `∫ ψ ρ dx` with ψ integrated exactly enough on each cell.
    pub fn integrate_against(&self, psi: &dyn Fn(f64) -> f64) -> f64 {
        (0..self.mass.len())
            .map(|j| {
                let (a, b) = (self.edges[j], self.edges[j + 1]);
                let avg: f64 = GAUSS6.iter().map(|&(t, w)| w * psi(a + (b - a) * t)).sum();
                self.mass[j] * avg
            })
            .sum()
    }

    /// `∫ |ρ_U − f| dx` over `[x_0, 1]`, with six Gauss points per cell.
    pub fn l1_distance(&self, f: &GridFunction) -> f64 {
        (1..self.mass.len())
            .map(|j| {
                let (a, b) = (self.edges[j], self.edges[j + 1]);
                let v = self.value(j);
                GAUSS6.iter().map(|&(t, w)| w * (b - a) * (v - f.interpolate(a + (b - a) * t)).abs()).sum::<f64>()
            })
            .sum()
    }

    /// Nodal values (mean of the two adjacent cells) on the partition mesh.
    pub fn to_grid_function(&self, mesh: &std::sync::Arc<Mesh>) -> Result<GridFunction> {
        let n = self.mass.len();
        let u = (0..n).map(|i| if i + 1 < n { 0.5 * (self.value(i) + self.value(i + 1)) } else { self.value(i) }).collect();
        GridFunction::new(mesh.clone(), 0.0, u)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_are_stochastic() {
        for a in [0.0, 0.3, 0.8] {
            let p = MapParams::new(a).unwrap();
            let m = Mesh::standard(&p, 512).unwrap();
            let u = build_ulam(&p, &m);
            for s in u.row_sums() {
                assert!((s - 1.0).abs() < 1e-12, "alpha {a}: {s}");
            }
            assert!(u.rows.iter().flatten().all(|e| e.1 >= 0.0));
        }
    }

    #[test]
    fn alpha_zero_stationary_is_uniform() {
        let p = MapParams::new(0.0).unwrap();
        let m = Mesh::standard(&p, 256).unwrap();
        let u = build_ulam(&p, &m);
        let d = ulam_stationary(&u, 1e-13, 100_000).unwrap();
        for j in 0..d.mass.len() {
            assert!((d.value(j) - 1.0).abs() < 1e-12, "cell {j}: {}", d.value(j));
        }
    }
}
