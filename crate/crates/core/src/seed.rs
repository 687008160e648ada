//! Stable, platform-independent hashing for seed derivation.
//!
//! `std`'s hashers are allowed to change between releases, which would make
//! persisted embeddings and seeded mocks drift, so derivation uses FNV-1a
//! followed by a splitmix64 finalizer.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds a base seed with a list of labelled parts into a new seed.
pub fn derive(seed: u64, parts: &[&str]) -> u64 {
    parts.iter().fold(splitmix64(seed), |acc, part| {
        splitmix64(acc ^ fnv1a(part.as_bytes()))
    })
}
