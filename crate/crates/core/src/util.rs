//! Small shared helpers: stable hashing for seeds, fingerprints and
//! parameter-group change detection.

/// FNV-1a over arbitrary bytes. Stable across runs and platforms, unlike
/// `std::collections::hash_map::RandomState`.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Derive a child seed from a master seed and a label, deterministically.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut buf = Vec::with_capacity(8 + label.len());
    buf.extend_from_slice(&master.to_le_bytes());
    buf.extend_from_slice(label.as_bytes());
    fnv1a64(&buf)
}

/// Hash a stream of f64 values bit-exactly. Used for parameter-freezing
/// contracts: equal hashes before/after a training phase mean the group
/// was untouched.
pub fn hash_f64s<'a>(values: impl IntoIterator<Item = &'a f64>) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_is_stable() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), fnv1a64(b"a"));
        assert_ne!(fnv1a64(b"a"), fnv1a64(b"b"));
    }

    #[test]
    fn derived_seeds_differ_by_label() {
        assert_ne!(derive_seed(7, "gan"), derive_seed(7, "collab"));
        assert_eq!(derive_seed(7, "gan"), derive_seed(7, "gan"));
    }

    #[test]
    fn f64_hash_sees_sign_and_payload() {
        assert_ne!(hash_f64s([0.0f64].iter()), hash_f64s([-0.0f64].iter()));
        assert_eq!(hash_f64s([1.5f64, 2.5].iter()), hash_f64s([1.5f64, 2.5].iter()));
    }
}
