//! Seed expansion.
//!
//! Inputs are expanded with a fixed xorshift64* generator so the same seed
//! produces the same bytes on every platform:
//!
//! * seeding: `splitmix64` (increment `0x9E3779B97F4A7C15`, mixers
//!   `0xBF58476D1CE4E5B9` and `0x94D049BB133111EB`, shifts 30/27/31);
//! * generation: xorshift64* with shifts `x ^= x >> 12; x ^= x << 25;
//!   x ^= x >> 27` and output multiplier `0x2545F4914F6CDD1D`.
//!
//! Everything else (agent sampling, minibatch shuffles, fuzzing, boosting)
//! uses ChaCha8 streams keyed by [`derive_seed`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const SPLITMIX_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
pub const XORSHIFT_STAR_MULT: u64 = 0x2545_F491_4F6C_DD1D;

/// One step of splitmix64 over `state`; returns the output and advances.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(SPLITMIX_GAMMA);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct XorShift64Star {
    state: u64,
}

impl XorShift64Star {
    pub fn new(seed: u64) -> Self {
        let mut s = seed;
        let mut state = splitmix64(&mut s);
        if state == 0 {
            state = SPLITMIX_GAMMA;
        }
        XorShift64Star { state }
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.state;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.state = x;
        x.wrapping_mul(XORSHIFT_STAR_MULT)
    }

    /// Fills `buf` eight bytes at a time, little-endian.
    pub fn fill_bytes(&mut self, buf: &mut [u8]) {
        for chunk in buf.chunks_mut(8) {
            let word = self.next_u64().to_le_bytes();
            chunk.copy_from_slice(&word[..chunk.len()]);
        }
    }
}

/// Mixes a root seed with a path of stream identifiers.
pub fn derive_seed(root: u64, path: &[u64]) -> u64 {
    let mut state = root;
    let mut out = splitmix64(&mut state);
    for &p in path {
        state ^= p.wrapping_mul(SPLITMIX_GAMMA).rotate_left(17) ^ out;
        out = splitmix64(&mut state);
    }
    out
}

pub fn chacha(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
