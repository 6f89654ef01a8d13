//! The Pomeau-Manneville family `T_α(x) = x(1 + 2^α x^α)` on `[0, 1/2)`,
//! `2x - 1` on `[1/2, 1]`, together with the inverse of the left branch and
//! the perturbation field `X_α` with its x- and α-derivatives.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

pub const DEFAULT_INVERSE_TOL: f64 = 1e-13;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawParams", into = "RawParams")]
pub struct MapParams {
    alpha: f64,
    scale: f64,
}

#[derive(Serialize, Deserialize)]
struct RawParams {
    alpha: f64,
}

impl TryFrom<RawParams> for MapParams {
    type Error = Error;
    fn try_from(r: RawParams) -> Result<Self> {
        MapParams::new(r.alpha)
    }
}

impl From<MapParams> for RawParams {
    fn from(p: MapParams) -> Self {
        RawParams { alpha: p.alpha }
    }
}

/// Everything about the left branch at one point `x`, evaluated at `y = g_α(x)`.
#[derive(Clone, Copy, Debug)]
pub struct Fields {
    pub g: f64,
    pub g1: f64,
    pub g2: f64,
    pub g3: f64,
    pub x: f64,
    pub x1: f64,
    pub x2: f64,
    pub x3: f64,
    /// ∂_α X and its first two x-derivatives.
    pub dx: f64,
    pub dx1: f64,
    pub dx2: f64,
}

impl MapParams {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha.is_finite() && (0.0..1.0).contains(&alpha)) {
            return Err(domain(format!("alpha must lie in [0, 1), got {alpha}")));
        }
        Ok(MapParams { alpha, scale: alpha.exp2() })
    }

    #[inline]
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// `2^α`.
    #[inline]
    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Unchecked map step in compensated form.
    #[inline]
    pub fn step(&self, x: f64) -> f64 {
        if x < 0.5 {
            x + self.scale * x * x.powf(self.alpha)
        } else {
            2.0 * x - 1.0
        }
    }

    pub fn forward(&self, x: f64) -> Result<f64> {
        check_unit(x)?;
        Ok(self.step(x).clamp(0.0, 1.0))
    }

    /// Derivative of the left branch formula at `x`, extended to `x >= 1/2`.
    pub fn left_deriv(&self, x: f64, order: u32) -> f64 {
        let (a, s) = (self.alpha, self.scale);
        match order {
            0 => x + s * x * x.powf(a),
            1 => 1.0 + s * (a + 1.0) * x.powf(a),
            _ => {
                let mut c = s * (a + 1.0);
                for j in 0..(order - 1) {
                    c *= a - j as f64;
                }
                if c == 0.0 {
                    0.0
                } else {
                    c * x.powf(a + 1.0 - order as f64)
                }
            }
        }
    }

    pub fn forward_deriv(&self, x: f64, order: u32) -> Result<f64> {
        check_unit(x)?;
        if !(1..=4).contains(&order) {
            return Err(domain(format!("derivative order {order} not in 1..=4")));
        }
        if x >= 0.5 {
            return Ok(if order == 1 { 2.0 } else { 0.0 });
        }
        if x == 0.0 && order >= 2 && self.alpha > 0.0 {
            return Err(domain("higher derivatives of T are singular at 0"));
        }
        Ok(self.left_deriv(x, order))
    }

    /// Inverse of the left branch, `f_α(g) = y`, never failing.
    ///
    /// Newton from the two-term expansion, bracketed in `[0, min(y, 1/2)]`.
    pub fn g(&self, y: f64) -> f64 {
        if y <= 0.0 {
            return 0.0;
        }
        if self.alpha == 0.0 {
            return 0.5 * y;
        }
        if y >= 1.0 {
            return 0.5;
        }
        let (a, s) = (self.alpha, self.scale);
        let mut lo = 0.0;
        let mut hi = y.min(0.5);
        let guess = y * (1.0 - s * y.powf(a));
        let mut x = if guess > lo && guess < hi { guess } else { 0.5 * hi };
        for _ in 0..200 {
            let xa = x.powf(a);
            let r = (x - y) + s * x * xa;
            if r > 0.0 {
                hi = x;
            } else if r < 0.0 {
                lo = x;
            } else {
                return x;
            }
            let d = 1.0 + s * (a + 1.0) * xa;
            let mut next = x - r / d;
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            let dx = (next - x).abs();
            x = next;
            if dx <= 1e-16 * x || hi - lo <= 1e-16 * hi {
                break;
            }
        }
        x
    }

    pub fn branch_inverse(&self, y: f64) -> Result<f64> {
        self.branch_inverse_tol(y, DEFAULT_INVERSE_TOL)
    }

    pub fn branch_inverse_tol(&self, y: f64, tol: f64) -> Result<f64> {
        check_unit(y)?;
        if !(tol > 0.0) {
            return Err(domain("inverse tolerance must be positive"));
        }
        let x = self.g(y);
        let residual = (self.left_deriv(x, 0) - y).abs();
        if residual > tol {
            return Err(Error::NotConverged { iterations: 200, residual });
        }
        Ok(x)
    }

    pub fn branch_inverse_deriv(&self, y: f64, order: u32) -> Result<f64> {
        check_unit(y)?;
        if y == 0.0 && self.alpha > 0.0 && order >= 2 {
            return Err(domain("higher derivatives of g are singular at 0"));
        }
        let x = self.g(y);
        let t1 = self.left_deriv(x, 1);
        let g1 = 1.0 / t1;
        match order {
            1 => Ok(g1),
            2 => Ok(-self.left_deriv(x, 2) * g1.powi(3)),
            3 => {
                let t2 = self.left_deriv(x, 2);
                let t3 = self.left_deriv(x, 3);
                Ok(-t3 * g1.powi(4) + 3.0 * t2 * t2 * g1.powi(5))
            }
            _ => Err(domain(format!("inverse derivative order {order} not in 1..=3"))),
        }
    }

    /// All left-branch quantities at a point `x ∈ (0, 1]`.
    pub fn fields(&self, x: f64) -> Fields {
        let (a, s) = (self.alpha, self.scale);
        let g = self.g(x);
        let t1 = self.left_deriv(g, 1);
        let t2 = self.left_deriv(g, 2);
        let t3 = self.left_deriv(g, 3);
        let g1 = 1.0 / t1;
        let g2 = -t2 * g1.powi(3);
        let g3 = -t3 * g1.powi(4) + 3.0 * t2 * t2 * g1.powi(5);

        let l = (2.0 * g).ln();
        let ga = g.powf(a);
        let h0 = ga * ((1.0 + a) * l + 1.0);
        let h1 = ga / g * ((a + a * a) * l + 1.0 + 2.0 * a);
        let h2 = ga / (g * g) * ((a - 1.0) * a * (1.0 + a) * l + 3.0 * a * a - 1.0);

        let xv = s * g * ga * l;
        let x1 = s * g1 * h0;
        let x2 = s * (g2 * h0 + g1 * g1 * h1);
        let x3 = s * (g3 * h0 + 3.0 * g1 * g2 * h1 + g1.powi(3) * h2);

        let p0 = s * ga * l * ((1.0 + a) * l + 2.0);
        let p1 = s * ga / g * (a * (1.0 + a) * l * l + (4.0 * a + 2.0) * l + 2.0);
        let dx = s * g * ga * l * l - xv * x1;
        let dx1 = g1 * p0 - x1 * x1 - xv * x2;
        let dx2 = g2 * p0 + g1 * g1 * p1 - 3.0 * x1 * x2 - xv * x3;

        Fields { g, g1, g2, g3, x: xv, x1, x2, x3, dx, dx1, dx2 }
    }

    /// `X_α(x) = 2^α g^{1+α} log(2g)`, with `X_α(0) = 0`.
    pub fn x_field(&self, x: f64) -> Result<f64> {
        check_unit(x)?;
        if x == 0.0 {
            return Ok(0.0);
        }
        Ok(self.fields(x).x)
    }

    pub fn x_prime(&self, x: f64) -> Result<f64> {
        check_open_unit(x)?;
        Ok(self.fields(x).x1)
    }

    pub fn x_double_prime(&self, x: f64) -> Result<f64> {
        check_open_unit(x)?;
        Ok(self.fields(x).x2)
    }

    /// `∂_α g_α(x) = -X_α(x) g'_α(x)`.
    pub fn dalpha_g(&self, x: f64) -> Result<f64> {
        check_unit(x)?;
        if x == 0.0 {
            return Ok(0.0);
        }
        let f = self.fields(x);
        Ok(-f.x * f.g1)
    }

    pub fn dalpha_x(&self, x: f64) -> Result<f64> {
        check_unit(x)?;
        if x == 0.0 {
            return Ok(0.0);
        }
        Ok(self.fields(x).dx)
    }

    pub fn dalpha_x_prime(&self, x: f64) -> Result<f64> {
        check_open_unit(x)?;
        Ok(self.fields(x).dx1)
    }

    pub fn dalpha_x_double_prime(&self, x: f64) -> Result<f64> {
        check_open_unit(x)?;
        Ok(self.fields(x).dx2)
    }
}

fn check_unit(x: f64) -> Result<()> {
    if (0.0..=1.0).contains(&x) {
        Ok(())
    } else {
        Err(domain(format!("point {x} outside [0, 1]")))
    }
}

fn check_open_unit(x: f64) -> Result<()> {
    if x > 0.0 && x <= 1.0 {
        Ok(())
    } else {
        Err(domain(format!("point {x} outside (0, 1]")))
    }
}
