//! Deterministic pseudo-random number generator.
//!
//! xoshiro256** seeded through SplitMix64. The generator is insulated from
//! external crate version bumps so that a fixed seed reproduces the same
//! synthetic corpus, the same weight initialization, and the same shuffles
//! on any build. The full state is four `u64` words, which makes it trivial
//! to embed in checkpoints and resume mid-stream.

/// xoshiro256** generator with SplitMix64 seeding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    state: [u64; 4],
}

impl Rng {
    /// Seeds the four state words by iterating SplitMix64 on `seed`.
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let mut state = [0u64; 4];
        for word in &mut state {
            *word = split_mix64(&mut sm);
        }
        // All-zero state would lock the generator at zero; SplitMix64 cannot
        // produce four zero outputs in a row, but guard anyway.
        if state == [0; 4] {
            state[0] = 0x9e3779b97f4a7c15;
        }
        Rng { state }
    }

    /// Restores a generator from a previously captured state.
    pub fn from_state(state: [u64; 4]) -> Self {
        Rng { state }
    }

    /// Captures the current state for checkpointing.
    pub fn state(&self) -> [u64; 4] {
        self.state
    }

    /// Next raw 64-bit output.
    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
        let result = s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform draw in [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal draw via Box-Muller.
    ///
    /// The paired cosine variate is discarded rather than cached: one draw
    /// per call keeps the stream position a pure function of call count,
    /// which checkpoint resume relies on.
    pub fn normal(&mut self) -> f64 {
        let mut u1 = self.uniform();
        if u1 <= 0.0 {
            u1 = f64::MIN_POSITIVE;
        }
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).sin()
    }

    /// Normal draw with the given mean and standard deviation.
    pub fn normal_with(&mut self, mean: f64, std_dev: f64) -> f64 {
        mean + std_dev * self.normal()
    }

    /// Unbiased integer draw in [0, bound) via Lemire's method.
    pub fn below(&mut self, bound: usize) -> usize {
        assert!(bound > 0, "below() requires a positive bound");
        let bound = bound as u64;
        let mut x = self.next_u64();
        let mut m = (x as u128) * (bound as u128);
        let mut low = m as u64;
        if low < bound {
            let threshold = bound.wrapping_neg() % bound;
            while low < threshold {
                x = self.next_u64();
                m = (x as u128) * (bound as u128);
                low = m as u64;
            }
        }
        (m >> 64) as usize
    }

    /// Bernoulli draw with success probability `p`.
    pub fn chance(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

fn split_mix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}
