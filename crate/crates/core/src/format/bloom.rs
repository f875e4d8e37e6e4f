//! Bloom filters over user keys, plus the sizing rule used to pick a
//! per-filter bit budget.

use num_traits::Float;
use xxhash_rust::xxh3::xxh3_64_with_seed;

use crate::error::{Error, Result};

const MIN_BITS: u64 = 64;
const SECOND_SEED: u64 = 0x9e37_79b9_7f4a_7c15;

/// Bits per element needed so that a lookup probing `overlap` filters sees
/// at most `fpr` false positives in total: `log2(overlap / fpr) / ln 2`.
pub fn bloom_bits_per_element<T: Float>(fpr: T, overlap: T) -> Result<T> {
    if !(fpr > T::zero() && fpr < T::one()) {
        return Err(Error::Domain("false-positive rate must lie in (0, 1)".into()));
    }
    if !(overlap >= T::one()) {
        return Err(Error::Domain("overlap must be at least 1".into()));
    }
    let ln2 = T::from(std::f64::consts::LN_2).unwrap();
    Ok((overlap / fpr).log2() / ln2)
}

/// Integer bit budget for a filter at `fpr` probed alongside `overlap`
/// others.
pub fn bloom_bits_per_key(fpr: f64, overlap: u32) -> Result<u32> {
    Ok(bloom_bits_per_element(fpr, overlap as f64)?.ceil() as u32)
}

/// Expected false-positive rate of a filter with `bits_per_key` bits and
/// `num_hashes` probes per element.
pub fn theoretical_fpr(bits_per_key: f64, num_hashes: u32) -> f64 {
    let k = num_hashes as f64;
    (1.0 - (-k / bits_per_key).exp()).powf(k)
}

#[derive(Clone, PartialEq, Eq)]
pub struct BloomFilter {
    bits: Vec<u8>,
    num_bits: u64,
    num_hashes: u32,
    salt: u64,
}

impl std::fmt::Debug for BloomFilter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BloomFilter")
            .field("num_bits", &self.num_bits)
            .field("num_hashes", &self.num_hashes)
            .finish()
    }
}

impl BloomFilter {
    pub fn build<K: AsRef<[u8]>>(keys: &[K], bits_per_key: u32, salt: u64) -> BloomFilter {
        let mut builder = BloomBuilder::new(bits_per_key, salt);
        for k in keys {
            builder.add(k.as_ref());
        }
        builder.finish()
    }

    pub fn num_hashes(&self) -> u32 {
        self.num_hashes
    }

    pub fn num_bits(&self) -> u64 {
        self.num_bits
    }

    pub fn may_contain(&self, key: &[u8]) -> bool {
        if self.num_hashes == 0 {
            return false;
        }
        let (mut h, delta) = hash_pair(key, self.salt);
        for _ in 0..self.num_hashes {
            let bit = h % self.num_bits;
            if self.bits[(bit / 8) as usize] & (1 << (bit % 8)) == 0 {
                return false;
            }
            h = h.wrapping_add(delta);
        }
        true
    }

    /// `[salt u64][num_hashes u32][num_bits u64][bits]`, little-endian.
    pub fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.salt.to_le_bytes());
        out.extend_from_slice(&self.num_hashes.to_le_bytes());
        out.extend_from_slice(&self.num_bits.to_le_bytes());
        out.extend_from_slice(&self.bits);
    }

    pub fn decode(data: &[u8]) -> Option<BloomFilter> {
        if data.len() < 20 {
            return None;
        }
        let salt = u64::from_le_bytes(data[0..8].try_into().unwrap());
        let num_hashes = u32::from_le_bytes(data[8..12].try_into().unwrap());
        let num_bits = u64::from_le_bytes(data[12..20].try_into().unwrap());
        let bits = data[20..].to_vec();
        if num_bits == 0 || bits.len() as u64 != num_bits.div_ceil(8) {
            return None;
        }
        Some(BloomFilter {
            bits,
            num_bits,
            num_hashes,
            salt,
        })
    }
}

/// Accumulates key hashes so a table builder does not have to keep keys.
pub struct BloomBuilder {
    hashes: Vec<(u64, u64)>,
    bits_per_key: u32,
    salt: u64,
}

impl BloomBuilder {
    pub fn new(bits_per_key: u32, salt: u64) -> Self {
        BloomBuilder {
            hashes: Vec::new(),
            bits_per_key: bits_per_key.max(1),
            salt,
        }
    }

    pub fn add(&mut self, key: &[u8]) {
        self.hashes.push(hash_pair(key, self.salt));
    }

    pub fn len(&self) -> usize {
        self.hashes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hashes.is_empty()
    }

    pub fn finish(self) -> BloomFilter {
        let num_bits = (self.hashes.len() as u64 * self.bits_per_key as u64).max(MIN_BITS);
        let num_bits = num_bits.div_ceil(8) * 8;
        let mut bits = vec![0u8; (num_bits / 8) as usize];
        let num_hashes = if self.hashes.is_empty() {
            0
        } else {
            ((self.bits_per_key as f64 * std::f64::consts::LN_2).round() as u32).max(1)
        };
        for (mut h, delta) in self.hashes {
            for _ in 0..num_hashes {
                let bit = h % num_bits;
                bits[(bit / 8) as usize] |= 1 << (bit % 8);
                h = h.wrapping_add(delta);
            }
        }
        BloomFilter {
            bits,
            num_bits,
            num_hashes,
            salt: self.salt,
        }
    }
}

fn hash_pair(key: &[u8], salt: u64) -> (u64, u64) {
    let h1 = xxh3_64_with_seed(key, salt);
    let h2 = xxh3_64_with_seed(key, salt ^ SECOND_SEED) | 1;
    (h1, h2)
}
