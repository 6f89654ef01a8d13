//! Interpolation, differentiation and quadrature weights on scattered nodes.

/// Finite-difference weights for derivatives 0..=m at `z` (Fornberg's recursion).
///
/// Returns `w[k][j]`: weight of node `xs[j]` in the k-th derivative.
pub fn fornberg(z: f64, xs: &[f64], m: usize) -> Vec<Vec<f64>> {
    let n = xs.len();
    let mut c = vec![vec![0.0; n]; m + 1];
    c[0][0] = 1.0;
    let mut c1 = 1.0;
    let mut c4 = xs[0] - z;
    for i in 1..n {
        let mn = i.min(m);
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = xs[i] - z;
        for j in 0..i {
            let c3 = xs[i] - xs[j];
            c2 *= c3;
            if j == i - 1 {
                for k in (1..=mn).rev() {
                    c[k][i] = c1 * (k as f64 * c[k - 1][i - 1] - c5 * c[k][i - 1]) / c2;
                }
                c[0][i] = -c1 * c5 * c[0][i - 1] / c2;
            }
            for k in (1..=mn).rev() {
                c[k][j] = (c4 * c[k][j] - k as f64 * c[k - 1][j]) / c3;
            }
            c[0][j] = c4 * c[0][j] / c3;
        }
        c1 = c2;
    }
    c
}

/// Lagrange basis values at `z` for nodes `xs`.
pub fn lagrange(z: f64, xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    (0..n)
        .map(|j| {
            let mut p = 1.0;
            for k in 0..n {
                if k != j {
                    p *= (z - xs[k]) / (xs[j] - xs[k]);
                }
            }
            p
        })
        .collect()
}

/// Six-point Gauss-Legendre rule on [0, 1]: (abscissa, weight).
pub const GAUSS6: [(f64, f64); 6] = [
    (0.033765242898423975, 0.08566224618958517),
    (0.16939530676686776, 0.18038078652406930),
    (0.38069040695840156, 0.23395696728634552),
    (0.6193095930415985, 0.23395696728634552),
    (0.8306046932331322, 0.18038078652406930),
    (0.966234757101576, 0.08566224618958517),
];
