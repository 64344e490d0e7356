//! Deterministic counter-based random number generator.
//!
//! splitmix64: the state is a counter advanced by a fixed odd constant and
//! each output is a finalizer hash of the counter. Identical seeds produce
//! byte-identical streams on every platform, and independent substreams can
//! be derived without consuming the parent stream.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Seeded counter-based generator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    seed: u64,
    counter: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { seed, counter: 0 }
    }

    /// Seed this generator was created with.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derive an independent substream without advancing this one.
    pub fn split(&self, stream: u64) -> Rng {
        // hash (seed, stream) into a fresh seed
        let mut mixer = Rng {
            seed: self.seed ^ mix(stream.wrapping_mul(GOLDEN_GAMMA) ^ 0xA0761D6478BD642F),
            counter: 0,
        };
        Rng::new(mixer.next_u64())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix(self
            .seed
            .wrapping_add(self.counter.wrapping_mul(GOLDEN_GAMMA)))
    }

    /// Uniform in [0, 1) with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n).
    pub fn next_below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        // multiply-shift; bias is negligible for the ranges used here
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Standard normal via the polar Box-Muller transform.
    pub fn normal(&mut self) -> f64 {
        loop {
            let u = self.uniform(-1.0, 1.0);
            let v = self.uniform(-1.0, 1.0);
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                return u * (-2.0 * s.ln() / s).sqrt();
            }
        }
    }

    /// Gamma(shape, scale 1) for shape >= 1, Marsaglia-Tsang squeeze method.
    pub fn gamma(&mut self, shape: f64) -> f64 {
        assert!(shape >= 1.0, "gamma sampler requires shape >= 1");
        let d = shape - 1.0 / 3.0;
        let c = 1.0 / (9.0 * d).sqrt();
        loop {
            let x = self.normal();
            let t = 1.0 + c * x;
            if t <= 0.0 {
                continue;
            }
            let v = t * t * t;
            let u = self.next_f64();
            if u < 1.0 - 0.0331 * (x * x) * (x * x) {
                return d * v;
            }
            if u > 0.0 && u.ln() < 0.5 * x * x + d * (1.0 - v + v.ln()) {
                return d * v;
            }
        }
    }
}

#[inline]
fn mix(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_seed_identical_stream() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..1000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn different_seeds_differ() {
        let mut a = Rng::new(1);
        let mut b = Rng::new(2);
        let same = (0..64).filter(|_| a.next_u64() == b.next_u64()).count();
        assert_eq!(same, 0);
    }

    #[test]
    fn split_streams_are_independent_of_parent_position() {
        let parent = Rng::new(7);
        let mut s1 = parent.split(3);
        let mut advanced = Rng::new(7);
        advanced.next_u64();
        let mut s2 = advanced.split(3);
        for _ in 0..100 {
            assert_eq!(s1.next_u64(), s2.next_u64());
        }
    }

    #[test]
    fn uniform_range_and_moments() {
        let mut rng = Rng::new(9);
        let n = 20_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let x = rng.next_f64();
            assert!((0.0..1.0).contains(&x));
            sum += x;
        }
        assert!((sum / n as f64 - 0.5).abs() < 0.01);
    }

    #[test]
    fn normal_moments() {
        let mut rng = Rng::new(11);
        let n = 50_000;
        let (mut m, mut m2) = (0.0, 0.0);
        for _ in 0..n {
            let x = rng.normal();
            m += x;
            m2 += x * x;
        }
        m /= n as f64;
        m2 /= n as f64;
        assert!(m.abs() < 0.02, "mean {m}");
        assert!((m2 - 1.0).abs() < 0.03, "second moment {m2}");
    }

    #[test]
    fn gamma_shape4_mean_and_variance() {
        // Gamma(k) has mean k and variance k
        let mut rng = Rng::new(13);
        let n = 50_000;
        let (mut m, mut m2) = (0.0, 0.0);
        for _ in 0..n {
            let x = rng.gamma(4.0);
            assert!(x > 0.0);
            m += x;
            m2 += x * x;
        }
        m /= n as f64;
        let var = m2 / n as f64 - m * m;
        assert!((m - 4.0).abs() < 0.05, "mean {m}");
        assert!((var - 4.0).abs() < 0.2, "var {var}");
    }
}
