//! Bit-domain polar encoding.
//!
//! Codes use the natural-order (non bit-reversed) generator
//! `G_N = G_2^{⊗n}` with `G_2 = [[1,0],[1,1]]`. A code is fully described by
//! its length, its frozen set and the CRC attached to the payload.

use serde::{Deserialize, Serialize};

use crate::error::invalid;
use crate::{Bit, Result};

/// CRC generator with an implicit leading `x^length` term.
///
/// `generator` holds the low-order coefficients, so `0x3` with length 4 is
/// `x^4 + x + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CrcConfig {
    pub length: usize,
    pub generator: u64,
}

impl CrcConfig {
    pub const NONE: CrcConfig = CrcConfig {
        length: 0,
        generator: 0,
    };

    /// `x^4 + x + 1`.
    pub const CRC4: CrcConfig = CrcConfig {
        length: 4,
        generator: 0x3,
    };

    pub fn new(length: usize, generator: u64) -> Result<Self> {
        if length > 63 {
            return Err(invalid(format!("CRC length {length} exceeds 63")));
        }
        if length < 64 && generator >> length != 0 {
            return Err(invalid(format!(
                "generator {generator:#x} has more than {length} coefficient bits"
            )));
        }
        Ok(Self { length, generator })
    }

    pub fn is_enabled(&self) -> bool {
        self.length > 0
    }

    /// Parses `off`, `none`, or a hex generator (`0x3`, which implies length 4
    /// unless given as `0x3/4`).
    pub fn parse(text: &str) -> Result<Self> {
        let text = text.trim();
        if text.eq_ignore_ascii_case("off") || text.eq_ignore_ascii_case("none") {
            return Ok(Self::NONE);
        }
        let (poly, len) = match text.split_once('/') {
            Some((p, l)) => (
                p,
                Some(
                    l.parse::<usize>()
                        .map_err(|_| invalid(format!("bad CRC length in {text:?}")))?,
                ),
            ),
            None => (text, None),
        };
        let poly = poly.trim_start_matches("0x").trim_start_matches("0X");
        let generator = u64::from_str_radix(poly, 16)
            .map_err(|_| invalid(format!("bad CRC generator {text:?}")))?;
        Self::new(len.unwrap_or(4), generator)
    }

    pub fn label(&self) -> String {
        if self.is_enabled() {
            format!("{:#x}/{}", self.generator, self.length)
        } else {
            "off".to_string()
        }
    }

    /// Remainder of `payload · x^r` modulo the generator, MSB first.
    pub fn remainder(&self, payload: &[Bit]) -> Vec<Bit> {
        let r = self.length;
        if r == 0 {
            return Vec::new();
        }
        let mask = (1u64 << r) - 1;
        let mut reg = 0u64;
        for &bit in payload {
            let feedback = (bit as u64 & 1) ^ ((reg >> (r - 1)) & 1);
            reg = (reg << 1) & mask;
            if feedback == 1 {
                reg ^= self.generator;
            }
        }
        (0..r).rev().map(|i| ((reg >> i) & 1) as Bit).collect()
    }

    /// `payload ∥ crc`.
    pub fn append(&self, payload: &[Bit]) -> Vec<Bit> {
        let mut out = payload.to_vec();
        out.extend(self.remainder(payload));
        out
    }

    /// True when the whole vector divides evenly by the generator.
    pub fn check(&self, bits: &[Bit]) -> bool {
        let r = self.length;
        if r == 0 {
            return true;
        }
        // Plain long division of the received polynomial, no augmentation.
        let full = (1u64 << r) | self.generator;
        let mut reg = 0u64;
        for &bit in bits {
            reg = (reg << 1) | (bit as u64 & 1);
            if reg >> r & 1 == 1 {
                reg ^= full;
            }
        }
        reg == 0
    }
}

impl Default for CrcConfig {
    fn default() -> Self {
        Self::NONE
    }
}

pub fn crc_append(payload: &[Bit], crc: &CrcConfig) -> Vec<Bit> {
    crc.append(payload)
}

pub fn crc_check(bits: &[Bit], crc: &CrcConfig) -> bool {
    crc.check(bits)
}

/// Whether a user-facing `K` includes the CRC bits or only the payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KConvention {
    #[default]
    IncludesCrc,
    ExcludesCrc,
}

impl KConvention {
    /// Number of non-frozen positions for a user-facing `k`.
    pub fn info_size(self, k: usize, crc: &CrcConfig) -> usize {
        match self {
            KConvention::IncludesCrc => k,
            KConvention::ExcludesCrc => k + crc.length,
        }
    }
}

/// One polar code instance: `(N, K, F)` plus the CRC.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeConfig {
    n: usize,
    frozen: Vec<bool>,
    info_positions: Vec<usize>,
    crc: CrcConfig,
}

impl CodeConfig {
    /// Builds a code from its frozen set. Duplicates in `frozen` are ignored.
    pub fn new(n: usize, frozen: impl IntoIterator<Item = usize>, crc: CrcConfig) -> Result<Self> {
        check_length(n)?;
        let mut mask = vec![false; n];
        for i in frozen {
            if i >= n {
                return Err(invalid(format!("frozen index {i} out of range for N={n}")));
            }
            mask[i] = true;
        }
        Self::from_mask(mask, crc)
    }

    /// Builds a code from its information set.
    pub fn from_info_set(n: usize, info: &[usize], crc: CrcConfig) -> Result<Self> {
        check_length(n)?;
        let mut mask = vec![true; n];
        for &i in info {
            if i >= n {
                return Err(invalid(format!("info index {i} out of range for N={n}")));
            }
            if !mask[i] {
                return Err(invalid(format!("info index {i} repeated")));
            }
            mask[i] = false;
        }
        Self::from_mask(mask, crc)
    }

    fn from_mask(frozen: Vec<bool>, crc: CrcConfig) -> Result<Self> {
        let info_positions: Vec<usize> = (0..frozen.len()).filter(|&i| !frozen[i]).collect();
        // A CRC needs at least one payload bit to protect.
        if crc.is_enabled() && info_positions.len() <= crc.length {
            return Err(invalid(format!(
                "K={} leaves no payload next to a {}-bit CRC",
                info_positions.len(),
                crc.length
            )));
        }
        Ok(Self {
            n: frozen.len(),
            frozen,
            info_positions,
            crc,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of non-frozen positions (payload plus CRC).
    pub fn k(&self) -> usize {
        self.info_positions.len()
    }

    pub fn payload_len(&self) -> usize {
        self.k() - self.crc.length
    }

    pub fn rate(&self) -> f64 {
        self.k() as f64 / self.n as f64
    }

    pub fn crc(&self) -> &CrcConfig {
        &self.crc
    }

    pub fn is_frozen(&self, i: usize) -> bool {
        self.frozen[i]
    }

    pub fn frozen_mask(&self) -> &[bool] {
        &self.frozen
    }

    pub fn frozen_set(&self) -> Vec<usize> {
        (0..self.n).filter(|&i| self.frozen[i]).collect()
    }

    /// Non-frozen positions, ascending.
    pub fn info_positions(&self) -> &[usize] {
        &self.info_positions
    }

    /// Source word `u` for a payload: CRC appended, scattered in ascending
    /// index order, frozen positions zero.
    pub fn source_word(&self, message: &[Bit]) -> Result<Vec<Bit>> {
        if message.len() != self.payload_len() {
            return Err(invalid(format!(
                "message length {} != K - r = {}",
                message.len(),
                self.payload_len()
            )));
        }
        let bits = self.crc.append(message);
        let mut u = vec![0; self.n];
        for (&pos, &b) in self.info_positions.iter().zip(&bits) {
            u[pos] = b;
        }
        Ok(u)
    }

    /// The K non-frozen bits of a source word, in ascending index order.
    pub fn extract_info(&self, u: &[Bit]) -> Vec<Bit> {
        self.info_positions.iter().map(|&i| u[i]).collect()
    }

    pub fn encode(&self, message: &[Bit]) -> Result<Vec<Bit>> {
        let mut u = self.source_word(message)?;
        polar_transform_in_place(&mut u);
        Ok(u)
    }
}

pub fn encode(message: &[Bit], cfg: &CodeConfig) -> Result<Vec<Bit>> {
    cfg.encode(message)
}

fn check_length(n: usize) -> Result<()> {
    if n < 2 || !n.is_power_of_two() {
        return Err(invalid(format!(
            "block length {n} is not a power of two >= 2"
        )));
    }
    Ok(())
}

/// `x = u · G_N` over GF(2).
pub fn polar_transform(u: &[Bit]) -> Result<Vec<Bit>> {
    if u.is_empty() || !u.len().is_power_of_two() {
        return Err(invalid(format!("length {} is not a power of two", u.len())));
    }
    let mut x = u.to_vec();
    polar_transform_in_place(&mut x);
    Ok(x)
}

/// In-place butterfly; the caller guarantees a power-of-two length.
pub fn polar_transform_in_place(x: &mut [Bit]) {
    let n = x.len();
    debug_assert!(n.is_power_of_two());
    let mut half = 1;
    while half < n {
        for block in (0..n).step_by(2 * half) {
            for j in block..block + half {
                x[j] ^= x[j + half];
            }
        }
        half *= 2;
    }
}

/// Frozen set complementary to the first `k` entries of a reliability order.
pub fn info_set_from_sequence(order: &[usize], k: usize, crc: CrcConfig) -> Result<CodeConfig> {
    let n = order.len();
    if k == 0 || k > n {
        return Err(invalid(format!("K={k} outside [1, {n}]")));
    }
    let mut seen = vec![false; n];
    for &i in order {
        if i >= n || seen[i] {
            return Err(invalid("sequence is not a permutation"));
        }
        seen[i] = true;
    }
    CodeConfig::from_info_set(n, &order[..k], crc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// `G_N` built as an explicit Kronecker power.
    fn generator_matrix(n: usize) -> Vec<Vec<Bit>> {
        let mut g = vec![vec![1u8]];
        while g.len() < n {
            let m = g.len();
            let mut next = vec![vec![0u8; 2 * m]; 2 * m];
            for r in 0..m {
                for c in 0..m {
                    let v = g[r][c];
                    next[r][c] = v;
                    next[r + m][c] = v;
                    next[r + m][c + m] = v;
                }
            }
            g = next;
        }
        g
    }

    fn mat_encode(u: &[Bit]) -> Vec<Bit> {
        let g = generator_matrix(u.len());
        (0..u.len())
            .map(|c| {
                u.iter()
                    .enumerate()
                    .fold(0, |acc, (r, &b)| acc ^ (b & g[r][c]))
            })
            .collect()
    }

    #[test]
    fn kernel_examples() {
        assert_eq!(polar_transform(&[1, 0]).unwrap(), vec![1, 0]);
        assert_eq!(polar_transform(&[0, 1]).unwrap(), vec![1, 1]);
        assert_eq!(polar_transform(&[0, 1, 0, 1]).unwrap(), vec![0, 0, 1, 1]);
        assert_eq!(polar_transform(&[0; 16]).unwrap(), vec![0; 16]);
    }

    #[test]
    fn non_power_of_two_rejected() {
        assert!(polar_transform(&[1, 0, 1]).is_err());
        assert!(polar_transform(&[]).is_err());
        assert!(CodeConfig::new(6, [0], CrcConfig::NONE).is_err());
    }

    #[test]
    fn eight_four_code_from_sequence() {
        let seq = [3, 5, 6, 7, 1, 2, 4, 0];
        let code = info_set_from_sequence(&seq, 4, CrcConfig::NONE).unwrap();
        assert_eq!(code.frozen_set(), vec![0, 1, 2, 4]);
        let u = code.source_word(&[1, 0, 0, 0]).unwrap();
        assert_eq!(u, vec![0, 0, 0, 1, 0, 0, 0, 0]);
        assert_eq!(code.encode(&[1, 0, 0, 0]).unwrap(), mat_encode(&u));
        assert_eq!(
            code.encode(&[1, 0, 0, 0]).unwrap(),
            vec![1, 1, 1, 1, 0, 0, 0, 0]
        );
        assert_eq!(code.encode(&[0; 4]).unwrap(), vec![0; 8]);
    }

    #[test]
    fn info_set_bounds() {
        let seq: Vec<usize> = (0..8).rev().collect();
        assert!(info_set_from_sequence(&seq, 0, CrcConfig::NONE).is_err());
        assert!(info_set_from_sequence(&seq, 9, CrcConfig::NONE).is_err());
        let full = info_set_from_sequence(&seq, 8, CrcConfig::NONE).unwrap();
        assert!(full.frozen_set().is_empty());
        assert!(info_set_from_sequence(&[0, 0, 1, 2], 2, CrcConfig::NONE).is_err());
    }

    #[test]
    fn wrong_message_length() {
        let code = CodeConfig::new(8, [0, 1, 2, 4], CrcConfig::NONE).unwrap();
        assert!(code.encode(&[1, 0, 0]).is_err());
        let code = CodeConfig::new(8, [0, 1], CrcConfig::CRC4).unwrap();
        assert_eq!(code.payload_len(), 2);
        assert!(code.encode(&[1, 0]).is_ok());
        assert!(CodeConfig::new(8, [0, 1, 2, 3, 4], CrcConfig::CRC4).is_err());
    }

    #[test]
    fn crc_example() {
        let crc = CrcConfig::CRC4;
        assert_eq!(crc.remainder(&[1, 0, 1, 0]), vec![1, 1, 0, 1]);
        assert_eq!(crc.append(&[1, 0, 1, 0]), vec![1, 0, 1, 0, 1, 1, 0, 1]);
        assert!(crc.check(&[1, 0, 1, 0, 1, 1, 0, 1]));
        assert_eq!(crc.remainder(&[0; 12]), vec![0; 4]);
        assert!(CrcConfig::NONE.check(&[]));
        assert!(CrcConfig::NONE.check(&[1, 0, 1]));
    }

    #[test]
    fn crc_parse() {
        assert_eq!(CrcConfig::parse("0x3").unwrap(), CrcConfig::CRC4);
        assert_eq!(CrcConfig::parse("off").unwrap(), CrcConfig::NONE);
        assert_eq!(
            CrcConfig::parse("0x1021/16").unwrap(),
            CrcConfig::new(16, 0x1021).unwrap()
        );
        assert!(CrcConfig::parse("0x30").is_err());
        assert!(CrcConfig::parse("zz").is_err());
    }

    #[test]
    fn k_convention() {
        assert_eq!(KConvention::IncludesCrc.info_size(16, &CrcConfig::CRC4), 16);
        assert_eq!(KConvention::ExcludesCrc.info_size(16, &CrcConfig::CRC4), 20);
    }

    proptest! {
        #[test]
        fn transform_matches_matrix(u in proptest::collection::vec(0u8..2, 16)) {
            prop_assert_eq!(polar_transform(&u).unwrap(), mat_encode(&u));
        }

        #[test]
        fn crc_roundtrip(p in proptest::collection::vec(0u8..2, 0..40)) {
            prop_assert!(CrcConfig::CRC4.check(&CrcConfig::CRC4.append(&p)));
        }

        #[test]
        fn frozen_set_order_irrelevant(mut f in proptest::sample::subsequence((0..16usize).collect::<Vec<_>>(), 4..12),
                                       m in proptest::collection::vec(0u8..2, 16)) {
            let a = CodeConfig::new(16, f.clone(), CrcConfig::NONE).unwrap();
            f.reverse();
            let b = CodeConfig::new(16, f, CrcConfig::NONE).unwrap();
            let msg = &m[..a.payload_len()];
            prop_assert_eq!(a.encode(msg).unwrap(), b.encode(msg).unwrap());
        }
    }
}
