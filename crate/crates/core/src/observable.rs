use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::GridFunction;

/// Bounded observables ψ on [0, 1].
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Observable {
    Const { c: f64 },
    /// `x^k`, `k ≤ 4`.
    Monomial { k: u32 },
    /// `cos(2π m x)`.
    Cos { m: u32 },
    Indicator { a: f64, b: f64 },
    /// Tent of height 1 on `[a, b]`, peak at the midpoint.
    Tent { a: f64, b: f64 },
    /// `sin²(π (x − a)/(b − a))` on `[a, b]`, zero outside.  C¹.
    Bump { a: f64, b: f64 },
    /// Smoothed indicator of `[a, 1]`: cubic smoothstep over `[a − w, a + w]`.
    Smoothstep { a: f64, w: f64 },
    Grid {
        #[serde(skip_serializing, skip_deserializing)]
        f: Option<GridFunction>,
        label: String,
    },
}

impl Observable {
    pub fn identity() -> Self {
        Observable::Monomial { k: 1 }
    }

    pub fn grid(f: GridFunction, label: impl Into<String>) -> Self {
        Observable::Grid { f: Some(f), label: label.into() }
    }

    pub fn validate(&self) -> Result<()> {
        let interval = |a: f64, b: f64| {
            if (0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b) && a < b {
                Ok(())
            } else {
                Err(invalid(format!("observable interval [{a}, {b}] must satisfy 0 ≤ a < b ≤ 1")))
            }
        };
        match self {
            Observable::Const { c } if !c.is_finite() => Err(invalid("constant must be finite")),
            Observable::Monomial { k } if *k > 4 => Err(invalid(format!("monomial degree {k} exceeds 4"))),
            Observable::Cos { m } if *m == 0 => Err(invalid("cos frequency must be positive")),
            Observable::Indicator { a, b } | Observable::Tent { a, b } | Observable::Bump { a, b } => {
                interval(*a, *b)
            }
            Observable::Smoothstep { a, w } => {
                if *w > 0.0 && a - w >= 0.0 && a + w <= 1.0 {
                    Ok(())
                } else {
                    Err(invalid("smoothstep ramp must lie inside [0, 1]"))
                }
            }
            Observable::Grid { f: None, .. } => Err(invalid("grid observable has no data")),
            _ => Ok(()),
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Observable::Const { c } => *c,
            Observable::Monomial { k } => x.powi(*k as i32),
            Observable::Cos { m } => (2.0 * PI * *m as f64 * x).cos(),
            Observable::Indicator { a, b } => {
                if x >= *a && x <= *b {
                    1.0
                } else {
                    0.0
                }
            }
            Observable::Tent { a, b } => {
                let c = 0.5 * (a + b);
                (1.0 - (x - c).abs() / (c - a)).max(0.0)
            }
            Observable::Bump { a, b } => {
                if x <= *a || x >= *b {
                    0.0
                } else {
                    (PI * (x - a) / (b - a)).sin().powi(2)
                }
            }
            Observable::Smoothstep { a, w } => {
                let t = ((x - (a - w)) / (2.0 * w)).clamp(0.0, 1.0);
                t * t * (3.0 - 2.0 * t)
            }
            Observable::Grid { f, .. } => f.as_ref().map_or(0.0, |f| f.interpolate(x.max(f64::MIN_POSITIVE))),
        }
    }

    /// ψ′, when ψ is continuously differentiable.
    pub fn derivative(&self, x: f64) -> Option<f64> {
        Some(match self {
            Observable::Const { .. } => 0.0,
            Observable::Monomial { k } => {
                if *k == 0 {
                    0.0
                } else {
                    *k as f64 * x.powi(*k as i32 - 1)
                }
            }
            Observable::Cos { m } => {
                let w = 2.0 * PI * *m as f64;
                -w * (w * x).sin()
            }
            Observable::Bump { a, b } => {
                if x <= *a || x >= *b {
                    0.0
                } else {
                    let w = PI / (b - a);
                    w * (2.0 * w * (x - a)).sin()
                }
            }
            Observable::Smoothstep { a, w } => {
                let t = (x - (a - w)) / (2.0 * w);
                if !(0.0..=1.0).contains(&t) {
                    0.0
                } else {
                    6.0 * t * (1.0 - t) / (2.0 * w)
                }
            }
            Observable::Indicator { .. } | Observable::Tent { .. } | Observable::Grid { .. } => return None,
        })
    }

    pub fn is_smooth(&self) -> bool {
        self.derivative(0.5).is_some()
    }

    /// Points where ψ or ψ′ jumps; quadrature cells are split there.
    pub fn breaks(&self) -> Vec<f64> {
        match self {
            Observable::Indicator { a, b } | Observable::Bump { a, b } => vec![*a, *b],
            Observable::Tent { a, b } => vec![*a, 0.5 * (a + b), *b],
            Observable::Smoothstep { a, w } => vec![a - w, a + w],
            _ => Vec::new(),
        }
    }

    /// Lipschitz observables that vanish on `[0, a)`: the faster decay regime.
    pub fn vanishes_near_zero(&self) -> bool {
        match self {
            Observable::Tent { a, .. } | Observable::Bump { a, .. } => *a > 0.0,
            Observable::Smoothstep { a, w } => a - w > 0.0,
            _ => false,
        }
    }

    pub fn id(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for Observable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Observable::Const { c } => write!(f, "const:{c}"),
            Observable::Monomial { k: 0 } => write!(f, "const:1"),
            Observable::Monomial { k: 1 } => write!(f, "x"),
            Observable::Monomial { k } => write!(f, "x^{k}"),
            Observable::Cos { m: 1 } => write!(f, "cos"),
            Observable::Cos { m } => write!(f, "cos:{m}"),
            Observable::Indicator { a, b } => write!(f, "ind:{a},{b}"),
            Observable::Tent { a, b } => write!(f, "tent:{a},{b}"),
            Observable::Bump { a, b } => write!(f, "bump:{a},{b}"),
            Observable::Smoothstep { a, w } => write!(f, "step:{a},{w}"),
            Observable::Grid { label, .. } => write!(f, "grid:{label}"),
        }
    }
}

impl FromStr for Observable {
    type Err = Error;

    /// `const[:c]`, `x`, `x^k`, `cos[:m]`, `ind:a,b`, `tent:a,b`, `bump:a,b`, `step:a,w`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (head, tail) = s.split_once(':').map_or((s, None), |(h, t)| (h, Some(t)));
        let nums = |t: Option<&str>, n: usize| -> Result<Vec<f64>> {
            let t = t.ok_or_else(|| invalid(format!("observable '{s}' needs {n} parameters")))?;
            let v: Vec<f64> = t
                .split(',')
                .map(|x| x.trim().parse::<f64>().map_err(|_| invalid(format!("bad number in observable '{s}'"))))
                .collect::<Result<_>>()?;
            if v.len() != n {
                return Err(invalid(format!("observable '{s}' needs {n} parameters")));
            }
            Ok(v)
        };
        let obs = match head {
            "const" | "1" => Observable::Const { c: if tail.is_some() { nums(tail, 1)?[0] } else { 1.0 } },
            "x" => Observable::Monomial { k: 1 },
            "cos" => Observable::Cos { m: if tail.is_some() { nums(tail, 1)?[0] as u32 } else { 1 } },
            "ind" => {
                let v = nums(tail, 2)?;
                Observable::Indicator { a: v[0], b: v[1] }
            }
            "tent" => {
                let v = nums(tail, 2)?;
                Observable::Tent { a: v[0], b: v[1] }
            }
            "bump" => {
                let v = nums(tail, 2)?;
                Observable::Bump { a: v[0], b: v[1] }
            }
            "step" => {
                let v = nums(tail, 2)?;
                Observable::Smoothstep { a: v[0], w: v[1] }
            }
            _ => {
                if let Some(k) = head.strip_prefix("x^") {
                    let k = k.parse::<u32>().map_err(|_| invalid(format!("bad monomial '{s}'")))?;
                    Observable::Monomial { k }
                } else {
                    return Err(invalid(format!("unknown observable '{s}'")));
                }
            }
        };
        obs.validate()?;
        Ok(obs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parse_and_print_round_trip() {
        for s in ["x", "x^3", "cos", "cos:2", "ind:0.5,1", "tent:0.25,1", "bump:0.5,1", "step:0.5,0.1", "const:2"] {
            let o: Observable = s.parse().unwrap();
            assert_eq!(o.to_string(), s);
        }
        assert!("x^5".parse::<Observable>().is_err());
        assert!("ind:0.7,0.2".parse::<Observable>().is_err());
        assert!("sin".parse::<Observable>().is_err());
    }

    #[test]
    fn smoothness_classes() {
        assert!(Observable::identity().is_smooth());
        assert!(!"ind:0,0.5".parse::<Observable>().unwrap().is_smooth());
        assert!(!"tent:0.2,0.6".parse::<Observable>().unwrap().is_smooth());
        assert!("bump:0.5,1".parse::<Observable>().unwrap().vanishes_near_zero());
    }

    proptest! {
        #[test]
        fn derivatives_match_differences(x in 0.01f64..0.99) {
            let h = 1e-6;
            for s in ["x^2", "x^4", "cos:3", "bump:0.2,0.9", "step:0.5,0.2"] {
                let o: Observable = s.parse().unwrap();
                if o.breaks().iter().any(|b| (b - x).abs() < 1e-4) {
                    continue;
                }
                let fd = (o.eval(x + h) - o.eval(x - h)) / (2.0 * h);
                prop_assert!((fd - o.derivative(x).unwrap()).abs() < 1e-5, "{s} at {x}");
            }
        }
    }
}
