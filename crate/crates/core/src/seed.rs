//! Seed derivation. Every stochastic stage draws from its own ChaCha stream
//! keyed by the user seed and a stage label, so adding a stage never shifts
//! the random numbers seen by another one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn label_hash(label: &str) -> u64 {
    // FNV-1a, stable across platforms and releases.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn stage_rng(seed: u64, label: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(label_hash(label));
    rng
}

pub fn derive_seed(seed: u64, label: &str) -> u64 {
    seed.rotate_left(17) ^ label_hash(label)
}
