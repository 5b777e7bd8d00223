//! Seeded randomness. Every stage draws from its own ChaCha stream whose seed
//! is derived from a root seed and a fixed stage label.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn rng_from(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent seed for `label` from `root` (FNV-1a of the label,
/// mixed with the root through a SplitMix64 finalizer).
pub fn derive_seed(root: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix(root ^ splitmix(h))
}

/// Seed for the `index`-th parallel unit (organ, expert, ...) of a stage.
pub fn derive_indexed(root: u64, label: &str, index: u64) -> u64 {
    splitmix(derive_seed(root, label).wrapping_add(index.wrapping_mul(0x9e37_79b9_7f4a_7c15)))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
