use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Ordinary least squares `y ≈ slope·x + intercept`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

pub fn line_fit(x: &[f64], y: &[f64]) -> Option<LineFit> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return None;
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        sxy += (a - mx) * (b - my);
        syy += (b - my) * (b - my);
    }
    if !(sxx > 0.0) {
        return None;
    }
    let slope = sxy / sxx;
    let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    Some(LineFit { slope, intercept: my - slope * mx, r2 })
}

/// Fit `|v_k| ≈ C k^{slope}` over the given indices, skipping zeros.
pub fn power_fit(ks: &[f64], v: &[f64]) -> Option<LineFit> {
    let (x, y): (Vec<f64>, Vec<f64>) =
        ks.iter().zip(v).filter(|(k, v)| **k > 0.0 && v.abs() > 0.0).map(|(k, v)| (k.ln(), v.abs().ln())).unzip();
    line_fit(&x, &y)
}

/// Percentile bootstrap interval for the slope of a line fit.
pub fn bootstrap_slope(x: &[f64], y: &[f64], resamples: usize, seed: u64) -> Option<(f64, f64)> {
    let n = x.len();
    if n < 3 {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut slopes = Vec::with_capacity(resamples);
    let (mut bx, mut by) = (vec![0.0; n], vec![0.0; n]);
    for _ in 0..resamples {
        for i in 0..n {
            let j = rng.gen_range(0..n);
            bx[i] = x[j];
            by[i] = y[j];
        }
        if let Some(f) = line_fit(&bx, &by) {
            slopes.push(f.slope);
        }
    }
    if slopes.len() < 10 {
        return None;
    }
    slopes.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = |p: f64| slopes[((slopes.len() - 1) as f64 * p).round() as usize];
    Some((q(0.025), q(0.975)))
}

pub fn mean_and_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, f64::NAN);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}
