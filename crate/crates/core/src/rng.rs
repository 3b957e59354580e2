//! Deterministic random number generation.
//!
//! Every random decision in the toolkit flows through [`SplitMix64`], a
//! counter-based generator with a published update rule, so that any draw
//! sequence can be replayed independently (in tests, or in another language)
//! from the seed alone:
//!
//! ```text
//! state += 0x9E3779B97F4A7C15
//! z = state
//! z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//! z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//! output = z ^ (z >> 31)
//! ```
//!
//! Derived draws are documented next to each helper: `next_f64` takes the top
//! 53 bits, `below` reduces `next_u64` modulo `n`, and `normal` consumes two
//! `next_f64` draws via Box-Muller (cosine branch).

/// SplitMix64 generator (Steele, Lea & Flood's mixer).
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1) with 53 bits of precision: `(next_u64() >> 11) / 2^53`.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n). Plain modulo reduction of one `next_u64`
    /// draw; the bias is negligible for the small `n` used here and keeps the
    /// draw stream trivial to replay.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        (self.next_u64() % n as u64) as usize
    }

    /// One Bernoulli(p) draw: `next_f64() < p`.
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Standard normal via Box-Muller, cosine branch. Consumes exactly two
    /// `next_f64` draws per call.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.next_f64().max(f64::MIN_POSITIVE);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// In-place Fisher-Yates shuffle, drawing `below(len - i)` per position
    /// from the front.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        let n = items.len();
        for i in 0..n.saturating_sub(1) {
            let j = i + self.below(n - i);
            items.swap(i, j);
        }
    }
}

/// FNV-1a 64-bit hash.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01B3);
    }
    h
}

/// Per-sample seed derivation: FNV-1a over the little-endian global seed
/// followed by the sample id bytes. Workers can process samples in any order
/// and still produce identical per-sample draw streams.
pub fn derive_seed(global_seed: u64, sample_id: &str) -> u64 {
    let mut bytes = Vec::with_capacity(8 + sample_id.len());
    bytes.extend_from_slice(&global_seed.to_le_bytes());
    bytes.extend_from_slice(sample_id.as_bytes());
    fnv1a(&bytes)
}
