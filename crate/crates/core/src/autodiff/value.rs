//! Plain f32 array with shape metadata, the storage type behind tape nodes.

use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A dense row-major f32 array. `product(shape) == data.len()` always holds.
#[derive(Clone, Debug, PartialEq)]
pub struct Value {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Value {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} implies {} elements but data has {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Value { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Value {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], v: f32) -> Self {
        let n = shape.iter().product();
        Value {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: f32) -> Self {
        Value {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Uniform samples in [lo, hi) from a seeded generator.
    pub fn uniform(shape: &[usize], lo: f32, hi: f32, rng: &mut ChaCha8Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Value {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Standard normal samples via Box-Muller from a seeded generator.
    pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| sample_normal(rng)).collect();
        Value {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// One standard-normal sample (Box-Muller).
pub fn sample_normal(rng: &mut ChaCha8Rng) -> f32 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
}

/// Truncated normal: resample until within `cut` standard deviations.
pub fn sample_trunc_normal(std: f32, cut: f32, rng: &mut ChaCha8Rng) -> f32 {
    loop {
        let z = sample_normal(rng);
        if z.abs() <= cut {
            return z * std;
        }
    }
}

/// splitmix64 finalizer, used to derive independent RNG streams.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

/// Deterministic per-stream RNG: distinct `stream` values give independent
/// sequences for the same base seed.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed) ^ splitmix64(stream.wrapping_mul(0x9E3779B97F4A7C15)))
}

/// Median of a slice (mean of the two central values for even lengths).
/// Returns an error on empty input.
pub fn median(values: &[f32]) -> Result<f32> {
    if values.is_empty() {
        return Err(Error::shape("median of empty slice"));
    }
    let mut sorted: Vec<f32> = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    if n % 2 == 1 {
        Ok(sorted[n / 2])
    } else {
        Ok(0.5 * (sorted[n / 2 - 1] + sorted[n / 2]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn value_shape_mismatch_is_error() {
        let err = Value::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains('5'), "{msg}");
    }

    #[test]
    fn median_odd_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]).unwrap(), 2.0);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]).unwrap(), 2.5);
        assert!(median(&[]).is_err());
    }

    #[test]
    fn seeded_rng_streams_are_independent_and_stable() {
        let a: Vec<f32> = {
            let mut r = seeded_rng(42, 0);
            (0..4).map(|_| r.gen_range(0.0..1.0)).collect()
        };
        let a2: Vec<f32> = {
            let mut r = seeded_rng(42, 0);
            (0..4).map(|_| r.gen_range(0.0..1.0)).collect()
        };
        let b: Vec<f32> = {
            let mut r = seeded_rng(42, 1);
            (0..4).map(|_| r.gen_range(0.0..1.0)).collect()
        };
        assert_eq!(a, a2);
        assert_ne!(a, b);
    }
}
