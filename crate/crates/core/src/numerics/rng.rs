//! Deterministic per-component RNG streams. All randomness in the crate
//! funnels through one experiment seed; each component derives its own
//! stream from a fixed label so adding a consumer never shifts another's
//! sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn label_hash(label: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// RNG stream for (seed, component label).
pub fn stream(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ label_hash(label))
}

/// Stream for a per-item substream, e.g. one patient within a generator.
pub fn substream(seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ label_hash(label) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}
