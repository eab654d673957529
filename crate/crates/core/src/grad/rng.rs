//! Counter-based random stream.
//!
//! A state is `(seed, counter)`. Draws come from ChaCha8 keyed by `seed`
//! with the keystream positioned at word `counter`; every draw advances the
//! counter by exactly the number of 32-bit words it consumed. Identical
//! `(seed, counter)` pairs give identical draws on every platform, and a run
//! never revisits a pair because the counter only grows.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Graph, GradError, Value};
use crate::scalar::Scalar;

pub const RNG_ALGORITHM: &str = "chacha8-wordpos-v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RngState {
    pub seed: u64,
    pub counter: u64,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self { seed, counter: 0 }
    }

    pub fn at(seed: u64, counter: u64) -> Self {
        Self { seed, counter }
    }

    /// Independent stream derived from this seed and a stream label.
    pub fn fork(&self, stream: u64) -> Self {
        Self::new(mix(self.seed ^ mix(stream.wrapping_add(0x5851_F42D_4C95_7F2D))))
    }

    fn with_rng<T>(&mut self, f: impl FnOnce(&mut ChaCha8Rng) -> T) -> T {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_word_pos(self.counter as u128);
        let out = f(&mut rng);
        self.counter = rng.get_word_pos() as u64;
        out
    }

    pub fn normals(&mut self, n: usize) -> Vec<f64> {
        self.with_rng(|r| (0..n).map(|_| r.sample(StandardNormal)).collect())
    }

    pub fn uniform(&mut self) -> f64 {
        self.with_rng(|r| r.random::<f64>())
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.with_rng(|r| r.random_range(0..n))
    }

    /// A full generator positioned at this state, for bulk use (the
    /// simulator). The state is not advanced.
    pub fn generator(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_word_pos(self.counter as u128);
        rng
    }
}

/// SplitMix64 finalizer.
pub(crate) fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// I.i.d. standard normal constant of the given shape.
pub fn sample_normal<S: Scalar>(g: &mut Graph<S>, rng: &mut RngState, shape: &[usize]) -> Result<Value, GradError> {
    let n = shape.iter().product();
    let data = rng.normals(n).into_iter().map(S::lit).collect();
    g.constant(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_state_same_draws() {
        let mut a = RngState::at(7, 0);
        let mut b = RngState::at(7, 0);
        assert_eq!(a.normals(4), b.normals(4));
        assert_eq!(a, b);
    }

    #[test]
    fn counter_advances_and_continues_stream() {
        let mut a = RngState::new(11);
        let first = a.normals(3);
        assert!(a.counter > 0);
        let second = a.normals(3);
        let mut b = RngState::new(11);
        let both = b.normals(6);
        assert_eq!([first, second].concat(), both);
    }

    #[test]
    fn empty_shape_gives_empty_value() {
        let mut g = Graph::<f64>::new();
        let mut rng = RngState::new(1);
        let v = sample_normal(&mut g, &mut rng, &[0]).unwrap();
        assert!(g.data(v).is_empty());
        assert_eq!(g.shape(v), &[0]);
        assert!(!g.requires_grad(v));
    }

    #[test]
    fn moments_of_a_million_draws() {
        let mut rng = RngState::new(2024);
        let xs = rng.normals(1_000_000);
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 4e-3, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-2, "var {var}");
    }

    #[test]
    fn forks_differ() {
        let base = RngState::new(5);
        assert_ne!(base.fork(0).seed, base.fork(1).seed);
        assert_eq!(base.fork(3), base.fork(3));
    }
}
