//! Portable random streams.
//!
//! Every random draw in the crate goes through [`Rng`], so a seed means the
//! same thing on every platform and in any port that follows this recipe:
//!
//! * generator: ChaCha20 (RFC 8439 block function, 64-bit counter) keyed by
//!   the little-endian bytes of the `u64` seed in key bytes `0..8`, all
//!   other key bytes zero, nonce/stream id = `stream`;
//! * uniform `f64` in `[0, 1)`: top 53 bits of the next `u64` output
//!   (little-endian concatenation of two 32-bit words) times `2^-53`;
//! * standard normal: Box–Muller on two uniforms `u1, u2`,
//!   `r = sqrt(-2 ln(1 - u1))`, `θ = 2π u2`, yielding `r cos θ` first and
//!   caching `r sin θ` for the next call.

use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

/// Stream ids used inside the crate. Distinct streams under one seed are
/// statistically independent.
pub mod streams {
    pub const STYLE: u64 = 0;
    pub const INIT_G: u64 = 1;
    pub const INIT_D: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const TRAIN_NOISE: u64 = 4;
    pub const CORPUS: u64 = 5;
    pub const CLASSIFIER: u64 = 6;
}

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha20Rng,
    spare: Option<f64>,
}

/// Serializable position of an [`Rng`], enough to resume it exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    /// ChaCha word position, decimal (exceeds u64 in principle).
    pub word_pos: String,
    pub spare: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        let mut inner = ChaCha20Rng::from_seed(key);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
            spare: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)` by rejection, `n > 0`.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = u64::MAX - (u64::MAX % n) - 1;
        loop {
            let v = self.next_u64();
            if v <= zone {
                return v % n;
            }
        }
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(s) = self.spare.take() {
            return s;
        }
        let u1 = self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * (1.0 - u1).ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn normals(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    pub fn normals_f32(&mut self, n: usize) -> Vec<f32> {
        (0..n).map(|_| self.normal() as f32).collect()
    }

    /// Fisher–Yates shuffle driven by [`Rng::below`].
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            stream: self.stream,
            word_pos: self.inner.get_word_pos().to_string(),
            spare: self.spare,
        }
    }

    pub fn from_state(state: &RngState) -> Option<Self> {
        let pos: u128 = state.word_pos.parse().ok()?;
        let mut rng = Self::new(state.seed, state.stream);
        rng.inner.set_word_pos(pos);
        rng.spare = state.spare;
        Some(rng)
    }
}
