//! Deterministic random streams.
//!
//! Dither vectors come from a counter-based generator: the value at position
//! `k` of the stream keyed by `seed` is a pure function of `(seed, k)`, so a
//! client and the server can regenerate identical dithers without sharing any
//! state beyond the seed. The construction is the SplitMix64 output function
//! applied to a keyed Weyl sequence.
//!
//! Everything else that needs randomness (SGD sampling, shuffles, network
//! init) uses ChaCha8 seeded through [`derive_seed`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Combines a seed with a second 64-bit value (round index, client id, tag).
#[inline]
pub fn mix(seed: u64, value: u64) -> u64 {
    mix64(seed ^ mix64(value.wrapping_add(GOLDEN)))
}

/// Seed derivation along a path of labels, e.g. `[client, round, TAG]`.
pub fn derive_seed(root: u64, path: &[u64]) -> u64 {
    path.iter().fold(root, |s, &p| mix(s, p))
}

/// Raw 64 bits at `index` of the counter-based stream keyed by `seed`.
#[inline]
pub fn counter_bits(seed: u64, index: u64) -> u64 {
    let key = mix64(seed);
    mix64(key.wrapping_add(index.wrapping_add(1).wrapping_mul(GOLDEN)))
}

/// Uniform double in `[0, 1)` with 53 bits of precision.
#[inline]
pub fn counter_uniform(seed: u64, index: u64) -> f64 {
    const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
    (counter_bits(seed, index) >> 11) as f64 * SCALE
}

pub fn chacha(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Tags that separate independent streams derived from one client seed.
pub mod tags {
    pub const LOCAL_TRAIN: u64 = 0x7261_696e;
    pub const PROBE: u64 = 0x7072_6f62;
    pub const LEARN: u64 = 0x6c65_6172;
    pub const LEARN_DITHER: u64 = 0x6c64_6974;
    pub const EVAL_DITHER: u64 = 0x6576_616c;
    pub const CLIENT: u64 = 0x636c_6e74;
    pub const INIT: u64 = 0x696e_6974;
    pub const PARTITION: u64 = 0x7061_7274;
    pub const CALIBRATION: u64 = 0x6361_6c69;
}
