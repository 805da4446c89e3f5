//! Counter-based random number stream.
//!
//! Each draw is a pure function of (seed, stream, counter), so any draw can
//! be reproduced from its coordinates and distinct streams never interact.
//! The mixer is splitmix64-style finalization over the combined key.

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngStream {
    pub seed: u64,
    pub stream: u64,
    pub counter: u64,
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        RngStream { seed, stream, counter: 0 }
    }

    /// Value at an explicit counter position, without advancing state.
    #[inline]
    pub fn value_at(&self, counter: u64) -> u64 {
        let k = mix64(self.seed ^ GOLDEN).wrapping_add(mix64(self.stream.wrapping_mul(GOLDEN)));
        mix64(k.wrapping_add(counter.wrapping_mul(GOLDEN)))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let v = self.value_at(self.counter);
        self.counter += 1;
        v
    }

    /// Uniform in [0, 1) with 53-bit resolution.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n). n must be positive.
    ///
    /// Plain modulo: the bias is O(n / 2^64), irrelevant next to the
    /// determinism requirement.
    #[inline]
    pub fn next_below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        self.next_u64() % n
    }

    /// Standard normal via Box-Muller; consumes exactly two draws.
    pub fn next_normal(&mut self) -> f64 {
        let u1 = (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        // Guard u1 = 0.
        let r = (-2.0 * (1.0 - u1).ln()).sqrt();
        r * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn fill_normal(&mut self, out: &mut [f64], std: f64) {
        for v in out.iter_mut() {
            *v = std * self.next_normal();
        }
    }

    /// Child stream with an independent stream id, derived deterministically.
    pub fn substream(&self, tag: u64) -> RngStream {
        RngStream::new(self.seed, mix64(self.stream ^ tag.wrapping_mul(GOLDEN)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_coordinates_same_draw() {
        let a = RngStream::new(42, 3);
        let b = RngStream::new(42, 3);
        for c in [0u64, 1, 17, u64::MAX] {
            assert_eq!(a.value_at(c), b.value_at(c));
        }
    }

    #[test]
    fn identical_seeds_identical_tensors() {
        let mut a = RngStream::new(9, 1);
        let mut b = RngStream::new(9, 1);
        let mut va = vec![0.0; 64];
        let mut vb = vec![0.0; 64];
        a.fill_normal(&mut va, 0.3);
        b.fill_normal(&mut vb, 0.3);
        assert_eq!(va, vb, "same (seed, stream) must give bit-identical tensors");
    }

    #[test]
    fn distinct_streams_differ() {
        let mut a = RngStream::new(9, 1);
        let mut b = RngStream::new(9, 2);
        let xs: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        assert_ne!(xs, ys);
    }

    #[test]
    fn normals_have_plausible_moments() {
        let mut rng = RngStream::new(123, 0);
        let mut v = vec![0.0; 200_000];
        rng.fill_normal(&mut v, 1.0);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }
}
