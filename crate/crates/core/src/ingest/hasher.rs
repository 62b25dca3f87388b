use serde::{Deserialize, Serialize};

use crate::domain::{Feature, FeatureVec};
use crate::error::{Error, Result};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a over the UTF-8 bytes of a token.
pub fn fnv1a(token: &str) -> u64 {
    token.bytes().fold(FNV_OFFSET, |h, b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Maps one token per field into that field's private index range.
///
/// Field `f` owns `[f * n_buckets, (f + 1) * n_buckets)`. Bucket 0 of each
/// field is reserved for a missing (empty) token; any other token lands in
/// `1 + fnv1a(token) % (n_buckets - 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureHasher {
    n_buckets: u32,
    n_fields: u32,
}

impl FeatureHasher {
    pub fn new(n_buckets: u32, n_fields: u32) -> Result<Self> {
        if n_buckets < 2 || !n_buckets.is_power_of_two() {
            return Err(Error::Generator(format!(
                "hasher needs a power-of-two bucket count >= 2, got {n_buckets}"
            )));
        }
        if n_fields == 0 || n_fields.checked_mul(n_buckets).is_none() {
            return Err(Error::Generator(format!("unsupported field count {n_fields}")));
        }
        Ok(Self { n_buckets, n_fields })
    }

    pub fn n_buckets(&self) -> u32 {
        self.n_buckets
    }

    pub fn n_fields(&self) -> u32 {
        self.n_fields
    }

    pub fn dim(&self) -> u32 {
        self.n_buckets * self.n_fields
    }

    pub fn bucket(&self, token: &str) -> u32 {
        if token.is_empty() {
            0
        } else {
            1 + (fnv1a(token) % (self.n_buckets as u64 - 1)) as u32
        }
    }

    pub fn index(&self, field: u32, token: &str) -> u32 {
        field * self.n_buckets + self.bucket(token)
    }

    /// One active index per field, value 1.
    pub fn hash_features<S: AsRef<str>>(&self, raw_fields: &[S]) -> FeatureVec {
        assert_eq!(
            raw_fields.len(),
            self.n_fields as usize,
            "expected one token per field"
        );
        raw_fields
            .iter()
            .enumerate()
            .map(|(f, tok)| Feature::one_hot(self.index(f as u32, tok.as_ref())))
            .collect()
    }
}
