//! Counter-based random streams.
//!
//! Every random quantity drawn by an estimator is read from a stream derived
//! from a [`StreamKey`]. The key is hashed into a ChaCha8 seed, so a stream
//! for `(seed, purpose, level, index)` can be built on any thread without
//! touching shared state, and results do not depend on scheduling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// What a stream is used for. Part of the key so that, e.g., the data index
/// and the inner samples of the same `(level, index)` pair never share bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Purpose {
    DataDraw,
    InnerSample,
    LevelDraw,
    Init,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::DataDraw => 0x6461_7461,
            Purpose::InnerSample => 0x696e_6e72,
            Purpose::LevelDraw => 0x6c65_766c,
            Purpose::Init => 0x696e_6974,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub seed: u64,
    pub purpose: Purpose,
    pub level: u32,
    pub index: u64,
}

impl StreamKey {
    pub fn new(seed: u64, purpose: Purpose, level: u32, index: u64) -> Self {
        Self {
            seed,
            purpose,
            level,
            index,
        }
    }
}

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed, e.g. one per replicate or per optimizer iteration.
pub fn fork(seed: u64, tag: u64) -> u64 {
    mix64(mix64(seed ^ 0x5851_f42d_4c95_7f2d) ^ mix64(tag.wrapping_add(0x1405_7b7e_f767_814f)))
}

fn key_to_seed(key: &StreamKey) -> [u8; 32] {
    let mut h = mix64(key.seed);
    h = mix64(h ^ key.purpose.tag());
    h = mix64(h ^ u64::from(key.level));
    h = mix64(h ^ key.index);
    let mut out = [0u8; 32];
    for (i, chunk) in out.chunks_exact_mut(8).enumerate() {
        h = mix64(h ^ (i as u64));
        chunk.copy_from_slice(&h.to_le_bytes());
    }
    out
}

/// A deterministic random stream. Owned by exactly one consumer.
#[derive(Debug, Clone)]
pub struct RandomStream {
    rng: ChaCha8Rng,
    normals_drawn: u64,
}

pub fn derive_stream(key: StreamKey) -> RandomStream {
    RandomStream {
        rng: ChaCha8Rng::from_seed(key_to_seed(&key)),
        normals_drawn: 0,
    }
}

impl RandomStream {
    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform on `(0, 1]`.
    pub fn uniform_open0(&mut self) -> f64 {
        1.0 - self.rng.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.normals_drawn += 1;
        self.rng.sample(StandardNormal)
    }

    /// Uniform integer in `0..n`. `n` must be positive.
    pub fn index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Number of standard-normal variates taken from this stream so far.
    pub fn normals_drawn(&self) -> u64 {
        self.normals_drawn
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(index: u64) -> StreamKey {
        StreamKey::new(7, Purpose::InnerSample, 3, index)
    }

    #[test]
    fn same_key_same_sequence() {
        let mut a = derive_stream(key(11));
        let mut b = derive_stream(key(11));
        for _ in 0..100 {
            assert_eq!(a.uniform().to_bits(), b.uniform().to_bits());
        }
    }

    #[test]
    fn purpose_and_level_change_the_stream() {
        let base = derive_stream(key(0)).clone().uniform();
        let other_purpose = derive_stream(StreamKey::new(7, Purpose::DataDraw, 3, 0)).uniform();
        let other_level = derive_stream(StreamKey::new(7, Purpose::InnerSample, 4, 0)).uniform();
        assert_ne!(base, other_purpose);
        assert_ne!(base, other_level);
    }

    #[test]
    fn neighbouring_indices_are_uncorrelated() {
        let n = 100_000u64;
        let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            let x = derive_stream(key(2 * i)).uniform();
            let y = derive_stream(key(2 * i + 1)).uniform();
            sx += x;
            sy += y;
            sxx += x * x;
            syy += y * y;
            sxy += x * y;
        }
        let nf = n as f64;
        let cov = sxy / nf - (sx / nf) * (sy / nf);
        let vx = sxx / nf - (sx / nf).powi(2);
        let vy = syy / nf - (sy / nf).powi(2);
        let corr = cov / (vx * vy).sqrt();
        assert!(corr.abs() < 0.01, "corr = {corr}");
    }

    #[test]
    fn uniform_mean() {
        let mut s = derive_stream(key(0));
        let n = 1_000_000;
        let mean = (0..n).map(|_| s.uniform()).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.002, "mean = {mean}");
    }

    #[test]
    fn normal_passes_ks() {
        use statrs::distribution::{ContinuousCDF, Normal};
        let std = Normal::new(0.0, 1.0).unwrap();
        let mut s = derive_stream(key(5));
        let n = 100_000;
        let mut xs: Vec<f64> = (0..n).map(|_| s.normal()).collect();
        xs.sort_by(f64::total_cmp);
        let mut d: f64 = 0.0;
        for (i, x) in xs.iter().enumerate() {
            let c = std.cdf(*x);
            d = d.max((c - i as f64 / n as f64).abs());
            d = d.max(((i + 1) as f64 / n as f64 - c).abs());
        }
        // Asymptotic critical value at alpha = 0.001 is 1.949 / sqrt(n).
        assert!(d < 1.949 / (n as f64).sqrt(), "KS statistic {d}");
        assert_eq!(s.normals_drawn(), n as u64);
    }

    #[test]
    fn open_uniform_never_zero() {
        let mut s = derive_stream(key(9));
        assert!((0..10_000).all(|_| {
            let u = s.uniform_open0();
            u > 0.0 && u <= 1.0
        }));
    }

    #[test]
    fn fork_is_deterministic_and_spreads() {
        assert_eq!(fork(1, 2), fork(1, 2));
        assert_ne!(fork(1, 2), fork(1, 3));
        assert_ne!(fork(1, 2), fork(2, 2));
    }
}
