//! Seeded string hashing and the sparse ternary hash family used for
//! on-the-fly random projection.

use serde::{Deserialize, Serialize};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Separator placed between a categorical feature name and its value before hashing.
pub const CATEGORY_SEPARATOR: char = '\u{1f}';

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(mut h: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Stable 64-bit hash of `(seed, salt, bytes)`. Unlike `DefaultHasher` this
/// does not change across toolchains, so serialized models stay valid.
pub fn hash_bytes(seed: u64, salt: u64, bytes: &[u8]) -> u64 {
    let mut h = fnv1a(FNV_OFFSET, &seed.to_le_bytes());
    h = fnv1a(h, &salt.to_le_bytes());
    h = fnv1a(h, bytes);
    mix64(h)
}

/// Hash key for a categorical feature/value pair.
pub fn category_key(feature: &str, value: &str) -> String {
    let mut s = String::with_capacity(feature.len() + value.len() + 1);
    s.push_str(feature);
    s.push(CATEGORY_SEPARATOR);
    s.push_str(value);
    s
}

/// `K` hash functions mapping strings to `{+1, -1, 0}` with probabilities
/// `1/6, 1/6, 2/3`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashFamily {
    dims: usize,
    seed: u64,
}

impl HashFamily {
    pub fn new(dims: usize, seed: u64) -> Self {
        Self { dims, seed }
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// `h_k(key)` for a zero-based projection index `k`.
    pub fn sign(&self, k: usize, key: &str) -> i8 {
        match hash_bytes(self.seed, k as u64, key.as_bytes()) % 6 {
            0 => 1,
            1 => -1,
            _ => 0,
        }
    }
}
