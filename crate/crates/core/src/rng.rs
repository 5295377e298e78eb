// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded random streams.
//!
//! Everything that draws random numbers takes an explicit `ChaCha8Rng`, so a
//! run is reproducible from its seed alone. Sub-streams are derived by
//! hashing a label into the seed, which keeps e.g. data generation and
//! weight init independent of each other's draw counts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Deterministic sub-stream for `(seed, label)`.
pub fn derive(seed: u64, label: &str) -> Rng {
    // FNV-1a over the label, folded into the seed with a splitmix finalizer.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    ChaCha8Rng::seed_from_u64(z)
}
