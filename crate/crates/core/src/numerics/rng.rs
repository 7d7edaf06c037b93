//! Deterministic pseudo-random numbers.
//!
//! The generator is xoshiro256++ seeded through splitmix64, both from the
//! public reference implementations by Blackman and Vigna. The algorithm is
//! fixed here (rather than delegated to an external crate) so that the exact
//! draw sequence for a given seed is part of this crate's contract: identical
//! seeds produce identical u64 streams on every platform. Uniform doubles are
//! derived from the top 53 bits and are therefore also bit-stable; normal
//! draws use the polar method, whose `ln`/`sqrt` calls follow the platform
//! libm and are deterministic within a platform.

/// splitmix64 step, used for seeding and for stateless index hashing.
pub fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// xoshiro256++ generator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rng {
    state: [u64; 4],
}

impl Rng {
    /// Create a generator from a 64-bit seed, expanding it with splitmix64.
    pub fn new(seed: u64) -> Self {
        let mut s = seed;
        let mut state = [0u64; 4];
        for word in &mut state {
            s = s.wrapping_add(0x9E37_79B9_7F4A_7C15);
            *word = splitmix64(s.wrapping_sub(0x9E37_79B9_7F4A_7C15));
        }
        // splitmix64 of distinct inputs is never all-zero in practice, but the
        // generator requires a nonzero state.
        if state == [0, 0, 0, 0] {
            state[0] = 1;
        }
        Rng { state }
    }

    /// Derive an independent stream from this seed and a label.
    ///
    /// All session randomness flows from one root seed; substreams are
    /// derived as `splitmix64(seed ^ fnv1a(tag)) ^ splitmix64(index)` so the
    /// derivation is documented and reproducible.
    pub fn substream(seed: u64, tag: &str, index: u64) -> Self {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in tag.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x1000_0000_01b3);
        }
        Rng::new(splitmix64(seed ^ h) ^ splitmix64(index))
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
        let result = s[0]
            .wrapping_add(s[3])
            .rotate_left(23)
            .wrapping_add(s[0]);
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

    /// Uniform integer in [0, n). `n` must be nonzero.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Lemire-style rejection keeps the distribution exactly uniform.
        let n = n as u64;
        let threshold = n.wrapping_neg() % n;
        loop {
            let r = self.next_u64();
            let hi = ((r as u128 * n as u128) >> 64) as u64;
            let lo = (r as u128 * n as u128) as u64;
            if lo >= threshold {
                return hi as usize;
            }
        }
    }

    /// Standard normal draw via the polar (Marsaglia) method.
    pub fn normal(&mut self) -> f64 {
        loop {
            let u = 2.0 * self.uniform() - 1.0;
            let v = 2.0 * self.uniform() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                return u * (-2.0 * s.ln() / s).sqrt();
            }
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Expose the raw state for checkpointing.
    pub fn state(&self) -> [u64; 4] {
        self.state
    }

    pub fn from_state(state: [u64; 4]) -> Self {
        Rng { state }
    }
}
