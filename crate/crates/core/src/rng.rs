//! Deterministic pseudo-random number generation.
//!
//! Every source of randomness in the crate flows through [`Rng`], a
//! splitmix64 generator. The stream produced by a given seed is identical
//! across platforms and builds, which is what makes seeded runs
//! byte-reproducible. Independent subsystems (chunk noise, cache eviction,
//! weight init) draw from separate derived streams so that enabling one
//! consumer never perturbs another.

/// Splitmix64 generator. Small state, full 64-bit period, good enough
/// statistical quality for toy rollouts and weight initialization.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        // Scramble the raw seed once so that adjacent seeds do not produce
        // correlated early outputs.
        Rng {
            state: mix(seed.wrapping_add(GOLDEN)),
        }
    }

    /// Derive an independent stream from `seed` and a list of salts
    /// (e.g. `[chunk_index, step_index]`). Same inputs, same stream.
    pub fn derive(seed: u64, salts: &[u64]) -> Self {
        let mut s = mix(seed.wrapping_add(GOLDEN));
        for &salt in salts {
            s = mix(s ^ salt.wrapping_mul(GOLDEN));
        }
        Rng { state: s }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix(self.state)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn next_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n).
    pub fn next_below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Modulo bias is negligible for the small n used here.
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller. Two uniforms per sample, no cached
    /// spare, so the draw count per call is fixed.
    pub fn next_normal(&mut self) -> f64 {
        let u1 = self.next_f64().max(f64::MIN_POSITIVE);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i + 1);
            items.swap(i, j);
        }
    }
}
