//! Orbit simulation for Monte Carlo estimates.
//!
//! At α = 0 the map is the doubling map, which destroys one mantissa bit per
//! step in floating point.  Orbits are then carried as 64-bit binary
//! fractions whose vacated low bits are refilled from the RNG, which samples
//! the exact orbit of a Lebesgue-random point.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::map::MapParams;

const TWO64: f64 = 18446744073709551616.0;

#[derive(Clone, Debug)]
enum State {
    Float(f64),
    Dyadic { m: u64, buf: u64, left: u32 },
}

#[derive(Clone, Debug)]
pub struct Orbit {
    p: MapParams,
    state: State,
    rng: ChaCha8Rng,
}

/// Independent generator for stream `stream` of a seeded family.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

impl Orbit {
    /// Start at a uniformly random point of `[j/n, (j+1)/n)`.
    pub fn stratified(p: &MapParams, j: usize, n: usize, mut rng: ChaCha8Rng) -> Orbit {
        let state = if p.alpha() == 0.0 {
            let u = rng.next_u64() as u128;
            let m = (((j as u128) << 64) | u) / n as u128;
            State::Dyadic { m: m as u64, buf: 0, left: 0 }
        } else {
            let u: f64 = rng.gen();
            State::Float((j as f64 + u) / n as f64)
        };
        Orbit { p: *p, state, rng }
    }

    pub fn uniform(p: &MapParams, rng: ChaCha8Rng) -> Orbit {
        Orbit::stratified(p, 0, 1, rng)
    }

    #[inline]
    pub fn x(&self) -> f64 {
        match self.state {
            State::Float(x) => x,
            State::Dyadic { m, .. } => m as f64 / TWO64,
        }
    }

    #[inline]
    pub fn step(&mut self) {
        match &mut self.state {
            State::Float(x) => {
                *x = if *x < 0.5 { self.p.step(*x) } else { 2.0 * *x - 1.0 };
            }
            State::Dyadic { m, buf, left } => {
                if *left == 0 {
                    *buf = self.rng.next_u64();
                    *left = 64;
                }
                *m = (*m << 1) | (*buf & 1);
                *buf >>= 1;
                *left -= 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dyadic_orbit_is_the_doubling_map() {
        let p = MapParams::new(0.0).unwrap();
        let mut o = Orbit::stratified(&p, 3, 8, stream_rng(1, 0));
        let x0 = o.x();
        assert!((0.375..0.5).contains(&x0));
        for _ in 0..200 {
            let x = o.x();
            o.step();
            let y = (2.0 * x) % 1.0;
            assert!((o.x() - y).abs() < 1e-15 || (o.x() - y).abs() > 1.0 - 1e-15);
        }
    }

    #[test]
    fn float_orbit_follows_the_map() {
        let p = MapParams::new(0.4).unwrap();
        let mut o = Orbit::uniform(&p, stream_rng(2, 5));
        for _ in 0..100 {
            let x = o.x();
            o.step();
            assert!((o.x() - p.forward(x).unwrap()).abs() < 1e-14);
        }
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream_rng(9, 1).next_u64();
        assert_eq!(a, stream_rng(9, 1).next_u64());
        assert_ne!(a, stream_rng(9, 2).next_u64());
    }
}
