//! A small stable hash used for threshold sampling and data splits.
//!
//! `std`'s hashers are not guaranteed stable across releases, and edge
//! retention decisions must be reproducible byte-for-byte across runs and
//! builds, so the mixing function is pinned here.

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hash a seed plus a sequence of integers.
pub fn hash_u64s(seed: u64, parts: &[u64]) -> u64 {
    let mut h = mix(seed ^ 0xD6E8_FEB8_6659_FD93);
    for &p in parts {
        h = mix(h ^ p);
    }
    h
}

/// Map a hash to [0, 1) with 53 bits of precision.
pub fn unit_interval(h: u64) -> f64 {
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Derive an independent stream seed from a base seed and a stream tag.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    hash_u64s(seed, &[tag])
}
