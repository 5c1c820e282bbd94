//! Deterministic seed derivation.
//!
//! All randomness in a run flows from one root seed. Independent streams are
//! keyed by `(root, purpose, index)` so that, for example, evaluation task 17
//! draws the same episode no matter which worker runs it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a root seed, a purpose label and an index into a new seed.
pub fn derive_seed(root: u64, purpose: &str, index: u64) -> u64 {
    // FNV-1a over the label keeps this stable across platforms and releases.
    let mut label: u64 = 0xcbf2_9ce4_8422_2325;
    for b in purpose.bytes() {
        label ^= u64::from(b);
        label = label.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(splitmix64(splitmix64(root) ^ label) ^ index)
}

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derive_rng(root: u64, purpose: &str, index: u64) -> Rng {
    rng_from_seed(derive_seed(root, purpose, index))
}
