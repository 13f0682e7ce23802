//! Deterministic pseudo-random generation.
//!
//! The generator is pinned so that every artifact (filter banks, weight
//! initializations, batch orders, augmentation streams) is bitwise
//! reproducible across runs and platforms:
//!
//! - core stream: xoshiro256++ (Blackman & Vigna), seeded by expanding a
//!   64-bit seed through SplitMix64;
//! - standard normals: Box-Muller on two 53-bit uniforms, one normal per
//!   pair (the sine half is discarded so the stream layout stays simple);
//! - subsystem seeds: `derive_seed(master, label)` hashes the label with
//!   FNV-1a and mixes it into the master seed through SplitMix64.
//!
//! All operations are integer or IEEE-754 double arithmetic with a fixed
//! evaluation order.

const TWO_POW_53: f64 = 9007199254740992.0; // 2^53

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xCBF29CE484222325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x100000001B3);
    }
    hash
}

/// Derive a subsystem seed from a master seed and a textual label.
///
/// Label-keyed derivation keeps subsystems independent of the order in
/// which they draw from the master stream.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut state = master ^ fnv1a64(label.as_bytes());
    splitmix64(&mut state)
}

/// xoshiro256++ generator with a recorded seed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    seed: u64,
    state: [u64; 4],
}

impl Rng {
    pub fn from_seed(seed: u64) -> Self {
        let mut sm = seed;
        let state = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        Rng { seed, state }
    }

    /// The seed this generator was constructed from.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child generator keyed by `label`; independent of draw order.
    pub fn split(&self, label: &str) -> Rng {
        Rng::from_seed(derive_seed(self.seed, label))
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

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / TWO_POW_53
    }

    /// Uniform integer in [0, bound).
    pub fn below(&mut self, bound: usize) -> usize {
        assert!(bound > 0, "below(0) is meaningless");
        (self.next_u64() % bound as u64) as usize
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal via Box-Muller; consumes exactly two u64 draws.
    pub fn standard_normal(&mut self) -> f64 {
        // u1 in (0, 1] keeps ln finite; u2 in [0, 1).
        let u1 = ((self.next_u64() >> 11) as f64 + 1.0) / TWO_POW_53;
        let u2 = (self.next_u64() >> 11) as f64 / TWO_POW_53;
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Fisher-Yates shuffle with this generator.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Raw state snapshot (for checkpointing).
    pub fn state(&self) -> [u64; 4] {
        self.state
    }

    /// Rebuild a generator from a snapshot.
    pub fn from_state(seed: u64, state: [u64; 4]) -> Self {
        Rng { seed, state }
    }
}
