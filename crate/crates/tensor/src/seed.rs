//! Deterministic derivation of purpose-specific RNG seeds.
//!
//! One user-facing seed fans out into independent streams (parameter init,
//! per-epoch shuffles, dropout, negative sampling, …) by hashing the base
//! seed together with a purpose tag and an index. FNV-1a plus a splitmix64
//! finisher keeps the mapping stable across platforms.

/// Derive a sub-seed from `base` for the given purpose and index.
pub fn derive(base: u64, tag: &str, k: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h = (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    eat(&base.to_le_bytes());
    eat(tag.as_bytes());
    eat(&k.to_le_bytes());

    // splitmix64 finisher for avalanche
    let mut z = h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
