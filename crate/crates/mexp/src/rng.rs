//! Counter-based random number generator.
//!
//! Every draw is a pure function of (key, counter), where the key is derived
//! by hashing a seed together with a list of stream words (e.g. a domain tag,
//! an epoch, a sample index). Generating sample i never depends on sample
//! i-1, so parallel generation across index ranges reproduces serial output
//! exactly, and resuming from any position is trivial.

/// SplitMix64 finalizer (Sebastiano Vigna). Good bit diffusion,
/// non-cryptographic.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// Counter-based generator: `next_u64` returns `mix64(key + ctr * GOLDEN)`.
#[derive(Clone, Debug)]
pub struct CounterRng {
    key: u64,
    ctr: u64,
}

impl CounterRng {
    /// Derive a keyed stream from a seed and a list of stream words.
    pub fn from_stream(seed: u64, words: &[u64]) -> Self {
        let mut k = mix64(seed ^ GOLDEN);
        for &w in words {
            k = mix64(k ^ mix64(w.wrapping_mul(GOLDEN)));
        }
        CounterRng { key: k, ctr: 0 }
    }

    pub fn new(seed: u64) -> Self {
        Self::from_stream(seed, &[])
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.ctr = self.ctr.wrapping_add(1);
        mix64(self.key.wrapping_add(self.ctr.wrapping_mul(GOLDEN)))
    }

    /// Uniform f64 in [0, 1) with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        const DEN: f64 = (1u64 << 53) as f64;
        ((self.next_u64() >> 11) as f64) / DEN
    }

    /// Unbiased uniform integer in [0, n). Lemire's multiply-shift with
    /// rejection of the biased region.
    pub fn uniform(&mut self, n: u64) -> u64 {
        assert!(n > 0, "uniform range must be nonempty");
        let threshold = n.wrapping_neg() % n;
        loop {
            let x = self.next_u64();
            let m = (x as u128) * (n as u128);
            if (m as u64) >= threshold {
                return (m >> 64) as u64;
            }
        }
    }

    /// Uniform integer in [lo, hi], inclusive.
    pub fn range_inclusive(&mut self, lo: u64, hi: u64) -> u64 {
        assert!(lo <= hi);
        lo + self.uniform(hi - lo + 1)
    }

    /// Standard normal via Box-Muller (two uniforms per call, no spare).
    pub fn normal(&mut self) -> f64 {
        let u1 = loop {
            let u = self.next_f64();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}
