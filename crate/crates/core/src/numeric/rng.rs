//! Seeded pseudo-random generator pinned for cross-platform reproducibility.
//!
//! The generator is SplitMix64 (Steele, Lea & Vigna): a 64-bit counter
//! advanced by the golden-gamma constant, finalized with two xor-shift
//! multiplies. It is fixed here on purpose — the same seed must produce the
//! same splits, episodes, and initializations on every platform and in every
//! future build, so we do not delegate to a library generator whose stream
//! could change between versions.

/// Deterministic 64-bit PRNG (SplitMix64).
#[derive(Debug, Clone)]
pub struct Prng {
    state: u64,
    seed: u64,
}

impl Prng {
    pub fn new(seed: u64) -> Self {
        Prng { state: seed, seed }
    }

    /// The seed this generator was constructed with.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Uniform integer in [0, n). Rejection-sampled so every value is
    /// exactly equally likely. Panics if n == 0.
    pub fn gen_range(&mut self, n: usize) -> usize {
        assert!(n > 0, "gen_range(0)");
        let n64 = n as u64;
        // Largest prefix of u64 that is a multiple of n.
        let zone = u64::MAX - (u64::MAX % n64 + 1) % n64;
        loop {
            let x = self.next_u64();
            if x <= zone {
                return (x % n64) as usize;
            }
        }
    }

    /// Standard normal via Box-Muller. Consumes exactly two uniforms per
    /// call (no cached spare), keeping the stream position predictable.
    pub fn next_normal(&mut self) -> f64 {
        // u1 in (0, 1] so the log is finite.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / 9_007_199_254_740_992.0);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.gen_range(i + 1);
            xs.swap(i, j);
        }
    }

    /// k distinct indices drawn uniformly from 0..n (partial Fisher-Yates).
    pub fn sample_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "sample_distinct: k > n");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.gen_range(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Reference outputs computed with an independent SplitMix64
    // implementation; the seed-0 values match the published vectors.
    #[test]
    fn matches_reference_sequence() {
        let mut r = Prng::new(0);
        assert_eq!(r.next_u64(), 0xe220a8397b1dcdaf);
        assert_eq!(r.next_u64(), 0x6e789e6aa1b965f4);
        assert_eq!(r.next_u64(), 0x06c45d188009454f);
        assert_eq!(r.next_u64(), 0xf88bb8a8724c81ec);

        let mut r = Prng::new(42);
        assert_eq!(r.next_u64(), 0xbdd732262feb6e95);
        assert_eq!(r.next_u64(), 0x28efe333b266f103);

        let mut r = Prng::new(0xDEADBEEF);
        assert_eq!(r.next_u64(), 0x4adfb90f68c9eb9b);
        assert_eq!(r.next_u64(), 0xde586a3141a10922);
    }

    #[test]
    fn uniform_doubles_match_reference() {
        let mut r = Prng::new(7);
        assert!((r.next_f64() - 0.3898297483912715).abs() < 1e-15);
        assert!((r.next_f64() - 0.01678829452815611).abs() < 1e-15);
        assert!((r.next_f64() - 0.9007606806068834).abs() < 1e-15);
    }

    #[test]
    fn same_seed_same_sequence() {
        let mut a = Prng::new(123);
        let mut b = Prng::new(123);
        for _ in 0..1000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn gen_range_stays_in_bounds_and_hits_everything() {
        let mut r = Prng::new(5);
        let mut seen = [false; 7];
        for _ in 0..1000 {
            seen[r.gen_range(7)] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn sample_distinct_yields_distinct_indices() {
        let mut r = Prng::new(11);
        for _ in 0..100 {
            let mut s = r.sample_distinct(20, 8);
            s.sort_unstable();
            s.dedup();
            assert_eq!(s.len(), 8);
            assert!(s.iter().all(|&i| i < 20));
        }
    }

    #[test]
    fn normals_have_sane_moments() {
        let mut r = Prng::new(99);
        let n = 20_000;
        let samples: Vec<f64> = (0..n).map(|_| r.next_normal()).collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }
}
