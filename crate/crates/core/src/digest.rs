//! Short stable digests used in cache keys, file headers and provenance.

use sha2::{Digest, Sha256};

/// First 8 bytes of SHA-256, hex encoded.
pub fn short_digest(text: &str) -> String {
    let hash = Sha256::digest(text.as_bytes());
    hash[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// 64-bit seed derived from a base seed and an arbitrary label.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    hasher.update(label.as_bytes());
    let hash = hasher.finalize();
    let mut out = [0u8; 8];
    out.copy_from_slice(&hash[..8]);
    u64::from_le_bytes(out)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digests_are_stable_and_distinct() {
        assert_eq!(short_digest("abc"), short_digest("abc"));
        assert_ne!(short_digest("abc"), short_digest("abd"));
        assert_eq!(short_digest("abc").len(), 16);
        assert_ne!(derive_seed(1, "x"), derive_seed(2, "x"));
    }
}
