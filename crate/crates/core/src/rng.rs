//! Deterministic seed derivation.
//!
//! All randomness in a run flows from a single root seed. Sub-streams are
//! derived by hashing a namespace string plus integer parts, so results do
//! not depend on scheduling interleavings or call order elsewhere.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable 64-bit hash of a byte stream (FNV-1a with a splitmix finalizer).
pub fn hash_bytes(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    splitmix64(h)
}

/// Derive a sub-seed from a root seed, a namespace, and integer parts.
pub fn derive_seed(root: u64, namespace: &str, parts: &[u64]) -> u64 {
    let mut h = splitmix64(root ^ hash_bytes(namespace.as_bytes()));
    for &p in parts {
        h = splitmix64(h ^ p.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    }
    h
}

/// Seeded RNG for a derived stream.
pub fn derive_rng(root: u64, namespace: &str, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, namespace, parts))
}
