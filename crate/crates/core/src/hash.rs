//! Feature hashing into a fixed-size weight table.
//!
//! Indices are the low `bits` bits of 64-bit FNV-1a over the namespace, a
//! 0x1E record separator, then the feature name. Cross features hash
//! `A 0x1E fa 0x1F B 0x1E fb` so they can never alias a base feature's
//! byte string.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub const NAMESPACE_SEP: u8 = 0x1e;
pub const PAIR_SEP: u8 = 0x1f;

pub const MAX_BITS: u32 = 31;

/// Incremental 64-bit FNV-1a.
#[derive(Debug, Clone, Copy)]
pub struct Fnv1a64(u64);

impl Default for Fnv1a64 {
    fn default() -> Self {
        Fnv1a64(FNV_OFFSET)
    }
}

impl Fnv1a64 {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn write(&mut self, bytes: &[u8]) -> &mut Self {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(FNV_PRIME);
        }
        self
    }

    pub fn write_byte(&mut self, b: u8) -> &mut Self {
        self.write(&[b])
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    Fnv1a64::new().write(bytes).finish()
}

#[inline]
pub fn mask(hash: u64, bits: u32) -> u32 {
    debug_assert!(bits <= MAX_BITS);
    (hash & ((1u64 << bits) - 1)) as u32
}

/// Index of a base feature. `bits` must be in `1..=31`.
pub fn hash_feature(namespace: &str, name: &str, bits: u32) -> u32 {
    let h = Fnv1a64::new()
        .write(namespace.as_bytes())
        .write_byte(NAMESPACE_SEP)
        .write(name.as_bytes())
        .finish();
    mask(h, bits)
}

/// Index of the cross feature `(ns_a:fa) x (ns_b:fb)`.
pub fn hash_pair(ns_a: &str, fa: &str, ns_b: &str, fb: &str, bits: u32) -> u32 {
    let h = Fnv1a64::new()
        .write(ns_a.as_bytes())
        .write_byte(NAMESPACE_SEP)
        .write(fa.as_bytes())
        .write_byte(PAIR_SEP)
        .write(ns_b.as_bytes())
        .write_byte(NAMESPACE_SEP)
        .write(fb.as_bytes())
        .finish();
    mask(h, bits)
}
