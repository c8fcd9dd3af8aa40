//! Seeded randomness.
//!
//! Every stochastic step in the crate draws from ChaCha8, a counter-based
//! stream cipher generator whose output is fixed by its seed on every
//! platform. Sub-streams are derived by mixing a label into the seed so that
//! adding a new consumer never perturbs existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type AtlasRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> AtlasRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream for `(seed, label)`.
pub fn substream(seed: u64, label: &str) -> AtlasRng {
    // FNV-1a over the label, folded into the seed with a splitmix finalizer.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    ChaCha8Rng::seed_from_u64(z)
}
