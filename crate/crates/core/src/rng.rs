//! Seed derivation.
//!
//! Every random stream in the crate is keyed by a base seed plus a small tuple
//! of identifiers, so a stream never depends on how much randomness some other
//! component consumed before it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a domain tag and identifiers into a new seed.
pub fn derive_seed(seed: u64, tag: &str, ids: &[u64]) -> u64 {
    let mut h = splitmix64(seed);
    for b in tag.bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    for &id in ids {
        h = splitmix64(h ^ id);
    }
    h
}

pub fn stream(seed: u64, tag: &str, ids: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, tag, ids))
}
