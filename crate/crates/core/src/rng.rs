//! Counter-based random numbers with explicit state.
//!
//! Every draw is a pure function of `(seed, position)`: the generator hashes
//! the pair with the SplitMix64 finalizer. There is no global generator;
//! callers thread an [`RngState`] through and hand split sub-streams to
//! parallel consumers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub position: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Distribution {
    /// Half-open `[low, high)`.
    Uniform { low: f64, high: f64 },
    Normal { mean: f64, std: f64 },
    /// 1 with probability `p`, else 0.
    Bernoulli { p: f64 },
}

impl Distribution {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Distribution::Uniform { low, high } if !(low.is_finite() && high.is_finite() && low <= high) => {
                Err(Error::InvalidArgument(format!("uniform bounds [{low}, {high}) are invalid")))
            }
            Distribution::Normal { mean, std } if !(mean.is_finite() && std.is_finite() && std >= 0.0) => {
                Err(Error::InvalidArgument(format!("normal std {std} must be finite and >= 0")))
            }
            Distribution::Bernoulli { p } if !(0.0..=1.0).contains(&p) => {
                Err(Error::InvalidArgument(format!("bernoulli p {p} outside [0, 1]")))
            }
            _ => Ok(()),
        }
    }
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState { seed, position: 0 }
    }

    pub fn next_u64(&mut self) -> u64 {
        let key = mix64(self.seed);
        self.position = self.position.wrapping_add(1);
        mix64(key.wrapping_add(self.position.wrapping_mul(GOLDEN_GAMMA)))
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, low: f64, high: f64) -> f64 {
        low + (high - low) * self.next_f64()
    }

    /// Standard normal via Box-Muller; consumes two positions.
    pub fn standard_normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64(); // (0, 1]
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Independent sub-stream keyed by `stream`. Does not advance `self`.
    pub fn split(&self, stream: u64) -> RngState {
        let seed = mix64(mix64(self.seed ^ GOLDEN_GAMMA) ^ mix64(self.position))
            ^ mix64(stream.wrapping_add(0xD1B5_4A32_D192_ED03));
        RngState { seed, position: 0 }
    }

    pub fn sample(&mut self, dist: Distribution) -> Result<f64> {
        dist.validate()?;
        Ok(self.sample_unchecked(dist))
    }

    fn sample_unchecked(&mut self, dist: Distribution) -> f64 {
        match dist {
            Distribution::Uniform { low, high } => self.uniform(low, high),
            Distribution::Normal { mean, std } => mean + std * self.standard_normal(),
            Distribution::Bernoulli { p } => {
                if self.bernoulli(p) {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Fill a tensor of `shape` with independent draws, in index order.
    pub fn draw<T: Scalar>(&mut self, dist: Distribution, shape: &[usize]) -> Result<Tensor<T>> {
        dist.validate()?;
        Tensor::from_fn(shape, |_| T::from_f64_lossy(self.sample_unchecked(dist)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_state_same_draws() {
        let mut a = RngState { seed: 7, position: 12 };
        let mut b = a;
        let ta: Tensor<f32> = a.draw(Distribution::Normal { mean: 0.0, std: 1.0 }, &[3, 4]).unwrap();
        let tb: Tensor<f32> = b.draw(Distribution::Normal { mean: 0.0, std: 1.0 }, &[3, 4]).unwrap();
        assert_eq!(ta, tb);
        assert_eq!(a, b);
        assert!(a.position > 12);
    }

    #[test]
    fn degenerate_and_bounded_draws() {
        let mut r = RngState::new(1);
        let ones: Tensor<f64> = r.draw(Distribution::Bernoulli { p: 1.0 }, &[100]).unwrap();
        assert!(ones.data().iter().all(|&v| v == 1.0));
        let u: Tensor<f64> = r
            .draw(Distribution::Uniform { low: 0.75, high: 1.25 }, &[10_000])
            .unwrap();
        assert!(u.data().iter().all(|&v| (0.75..=1.25).contains(&v)));
    }

    #[test]
    fn invalid_parameters() {
        let mut r = RngState::new(1);
        assert!(r.draw::<f32>(Distribution::Normal { mean: 0.0, std: -1.0 }, &[1]).is_err());
        assert!(r.draw::<f32>(Distribution::Bernoulli { p: 1.5 }, &[1]).is_err());
        assert!(r.draw::<f32>(Distribution::Bernoulli { p: -0.1 }, &[1]).is_err());
    }

    #[test]
    fn split_is_deterministic_and_distinct() {
        let r = RngState::new(99);
        assert_eq!(r.split(3), r.split(3));
        let mut a = r.split(3);
        let mut b = r.split(4);
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn moments_are_plausible() {
        let mut r = RngState::new(5);
        let n = 200_000;
        let xs: Vec<f64> = (0..n).map(|_| r.standard_normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01, "{mean}");
        assert!((var - 1.0).abs() < 0.02, "{var}");
        let mut counts = [0usize; 5];
        for _ in 0..50_000 {
            counts[r.below(5)] += 1;
        }
        assert!(counts.iter().all(|&c| (9_000..11_000).contains(&c)), "{counts:?}");
    }
}
