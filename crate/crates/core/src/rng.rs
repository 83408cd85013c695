//! Seeded random streams.
//!
//! Every stochastic operation takes an explicit `u64` seed. Work split over
//! items (images, grids, pFID cells) derives one substream per item from
//! `(seed, ordinal)` so results do not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent seed for item `ordinal` of a stream rooted at `seed`.
pub fn derive_seed(seed: u64, ordinal: u64) -> u64 {
    mix64(mix64(seed) ^ mix64(ordinal.wrapping_add(0xD1B5_4A32_D192_ED03)))
}

/// Derives a seed for a named purpose, e.g. `"positions"` vs `"sampling"`.
pub fn derive_tagged(seed: u64, tag: &str) -> u64 {
    let h = tag
        .bytes()
        .fold(0xCBF2_9CE4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01B3));
    derive_seed(seed, h)
}

pub fn rng_from(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn substream(seed: u64, ordinal: u64) -> Rng {
    rng_from(derive_seed(seed, ordinal))
}

/// Round-half-up of a non-negative real to a count.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}
