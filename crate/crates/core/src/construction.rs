//! Non-learned reliability sequences: DE with Gaussian approximation, the
//! 5G-NR universal sequence, and genie-aided Monte-Carlo estimation.
//!
//! Every generator returns a [`ReliabilitySequence`] ordered most reliable
//! first, so the rate-`K/N` information set is always the length-`K` prefix.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{
    bpsk_modulate, frame_rng, llr_demodulate, transmit, ChannelKind, ChannelModel, SnrAxis,
};
use crate::code::{info_set_from_sequence, CodeConfig, CrcConfig};
use crate::decoder::{genie_leaf_llrs, Metric};
use crate::digest::sha256_hex;
use crate::error::invalid;
use crate::{Error, Result};

/// Where a sequence came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "lowercase")]
pub enum Provenance {
    Nr,
    Dega {
        design_ebno_db: f64,
        rate: f64,
    },
    Mc {
        channel: ChannelKind,
        ebno_db: f64,
        rate: f64,
        trials: u64,
        seed: u64,
    },
    Rl {
        config_digest: String,
        seed: u64,
        #[serde(default)]
        params: BTreeMap<String, serde_json::Value>,
    },
}

impl Provenance {
    pub fn scheme(&self) -> &'static str {
        match self {
            Provenance::Nr => "nr",
            Provenance::Dega { .. } => "dega",
            Provenance::Mc { .. } => "mc",
            Provenance::Rl { .. } => "rl",
        }
    }
}

/// Bit-channel indices, most reliable first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilitySequence {
    pub version: u32,
    #[serde(rename = "N")]
    pub n: usize,
    pub order: Vec<usize>,
    pub provenance: Provenance,
    /// Who wrote the file; ignored when comparing orders.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub header: Option<ArtifactHeader>,
}

/// Tool version, configuration digest and seed stamped into output files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactHeader {
    pub tool: String,
    pub config_digest: String,
    pub seed: u64,
}

impl ArtifactHeader {
    /// `# tool=<..> config_digest=<..> seed=<..>` for line-oriented files.
    pub fn comment_line(&self) -> String {
        format!(
            "# tool={} config_digest={} seed={}",
            self.tool, self.config_digest, self.seed
        )
    }
}

impl ReliabilitySequence {
    pub fn new(order: Vec<usize>, provenance: Provenance) -> Result<Self> {
        let seq = Self {
            version: 1,
            n: order.len(),
            order,
            provenance,
            header: None,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        if self.order.len() != self.n {
            return Err(invalid(format!(
                "order has {} entries, N = {}",
                self.order.len(),
                self.n
            )));
        }
        let mut seen = vec![false; self.n];
        for &i in &self.order {
            if i >= self.n || seen[i] {
                return Err(invalid("order is not a permutation of [0, N)"));
            }
            seen[i] = true;
        }
        Ok(())
    }

    /// First `k` indices.
    pub fn info_set(&self, k: usize) -> Result<&[usize]> {
        if k == 0 || k > self.n {
            return Err(invalid(format!("K={k} outside [1, {}]", self.n)));
        }
        Ok(&self.order[..k])
    }

    pub fn code(&self, k: usize, crc: CrcConfig) -> Result<CodeConfig> {
        info_set_from_sequence(&self.order, k, crc)
    }

    pub fn with_header(mut self, header: ArtifactHeader) -> Self {
        self.header = Some(header);
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("sequence serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let seq: Self =
            serde_json::from_str(text).map_err(|e| invalid(format!("sequence JSON: {e}")))?;
        if seq.version != 1 {
            return Err(Error::Unsupported(format!(
                "sequence version {}",
                seq.version
            )));
        }
        seq.validate()?;
        Ok(seq)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// DE / GA

/// Gaussian-approximation function `φ(m)` (two-piece form).
///
/// The small-`m` piece exceeds 1 below `m ≈ 0.029`; it is capped there.
/// The pieces meet with a small jump at `m = 10` (0.0388 vs 0.0394).
pub fn phi(m: f64) -> f64 {
    if m <= 0.0 {
        1.0
    } else if m < 10.0 {
        (-0.4527 * m.powf(0.859) + 0.0218).exp().min(1.0)
    } else {
        (-m / 4.0).exp() * (std::f64::consts::PI / m).sqrt() * (1.0 - 10.0 / (7.0 * m))
    }
}

/// `φ⁻¹(y)` by bisection to 1e-9 absolute.
pub fn phi_inv(y: f64) -> f64 {
    if y >= 1.0 {
        return 0.0;
    }
    let mut lo = 0.0;
    let mut hi = 1.0;
    while phi(hi) > y {
        hi *= 2.0;
    }
    while hi - lo > 1e-9 {
        let mid = 0.5 * (lo + hi);
        if phi(mid) > y {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Mean LLR of the degraded channel `W⁻` built from two copies of mean `m`.
pub fn ga_worse(m: f64) -> f64 {
    let p = phi(m);
    if p < 1e-280 {
        // φ has underflowed; use φ(m) ~ e^{-m/4}, so 2φ shifts m by 4 ln 2.
        return (m - 4.0 * std::f64::consts::LN_2).max(0.0);
    }
    // 1 − (1 − φ)² without cancellation.
    phi_inv(p * (2.0 - p))
}

/// Final per-index mean LLRs under DE/GA, index order.
pub fn dega_means(n: usize, sigma2: f64) -> Result<Vec<f64>> {
    if n < 2 || !n.is_power_of_two() {
        return Err(invalid(format!("N={n} is not a power of two")));
    }
    let mut means = vec![2.0 / sigma2];
    while means.len() < n {
        means = means.iter().flat_map(|&m| [ga_worse(m), 2.0 * m]).collect();
    }
    Ok(means)
}

fn rank_descending(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    // Higher mean first; exact ties go to the larger index.
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(b.cmp(&a)));
    idx
}

pub fn dega_sequence(n: usize, design_ebno_db: f64, rate: f64) -> Result<ReliabilitySequence> {
    let sigma2 = SnrAxis::EbN0.sigma2(design_ebno_db, rate)?;
    let means = dega_means(n, sigma2)?;
    ReliabilitySequence::new(
        rank_descending(&means),
        Provenance::Dega {
            design_ebno_db,
            rate,
        },
    )
}

// ---------------------------------------------------------------------------
// 5G NR

const NR_TABLE: &str = include_str!("../data/nr_universal.txt");
const NR_TABLE_SHA256: &str = "aaf141df91f46b9d06d3d54188a39da37843b6000367f91b24c2f72ba5920958";
pub const NR_HEADER: &str = "#nr-universal-v1";

/// Parses an NR table file: header line, then one index per line in
/// ascending reliability.
pub fn parse_nr_table(text: &str) -> Result<Vec<usize>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(NR_HEADER) {
        return Err(invalid(format!("NR table must start with {NR_HEADER}")));
    }
    let table: Vec<usize> = lines
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.parse::<usize>()
                .map_err(|_| invalid(format!("bad NR entry {l:?}")))
        })
        .collect::<Result<_>>()?;
    if table.len() != 1024 {
        return Err(invalid(format!("NR table has {} entries", table.len())));
    }
    let mut seen = vec![false; 1024];
    for &i in &table {
        if i >= 1024 || seen[i] {
            return Err(invalid("NR table is not a permutation"));
        }
        seen[i] = true;
    }
    Ok(table)
}

/// The embedded universal table, ascending reliability (index 0 first).
pub fn nr_table() -> &'static [usize] {
    static TABLE: OnceLock<Vec<usize>> = OnceLock::new();
    TABLE.get_or_init(|| {
        assert_eq!(
            sha256_hex(NR_TABLE.as_bytes()),
            NR_TABLE_SHA256,
            "embedded NR table checksum mismatch"
        );
        parse_nr_table(NR_TABLE).expect("embedded NR table is valid")
    })
}

pub fn nr_sequence(n: usize) -> Result<ReliabilitySequence> {
    if n > 1024 {
        return Err(Error::Unsupported(format!(
            "N={n} exceeds the 1024-entry NR table"
        )));
    }
    if n < 2 || !n.is_power_of_two() {
        return Err(invalid(format!("N={n} is not a power of two")));
    }
    let order: Vec<usize> = nr_table()
        .iter()
        .rev()
        .copied()
        .filter(|&i| i < n)
        .collect();
    ReliabilitySequence::new(order, Provenance::Nr)
}

// ---------------------------------------------------------------------------
// Genie-aided Monte-Carlo

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitChannelStats {
    pub errors: Vec<u64>,
    pub trials: u64,
}

impl BitChannelStats {
    pub fn merge(mut self, other: &BitChannelStats) -> Self {
        for (a, b) in self.errors.iter_mut().zip(&other.errors) {
            *a += b;
        }
        self.trials += other.trials;
        self
    }

    pub fn error_rate(&self, i: usize) -> f64 {
        self.errors[i] as f64 / self.trials as f64
    }

    pub fn std_error(&self, i: usize) -> f64 {
        let p = self.error_rate(i);
        (p * (1.0 - p) / self.trials as f64).sqrt()
    }
}

/// Counts first-error events per bit channel over trials `[start, end)`.
///
/// The all-zero codeword is sent; a leaf counts as an error when its LLR
/// would decide 1 (negative LLR).
pub fn genie_error_counts(
    n: usize,
    model: &ChannelModel,
    seed: u64,
    start: u64,
    end: u64,
) -> BitChannelStats {
    let zeros = vec![0u8; n];
    let symbols = bpsk_modulate(&zeros);
    let errors = (start..end)
        .into_par_iter()
        .fold(
            || vec![0u64; n],
            |mut acc, t| {
                let rx = transmit(&symbols, model, &mut frame_rng(seed, t));
                let llrs = llr_demodulate(&rx, model.sigma2);
                for (c, l) in acc
                    .iter_mut()
                    .zip(genie_leaf_llrs(&llrs, &zeros, Metric::Exact))
                {
                    *c += (l < 0.0) as u64;
                }
                acc
            },
        )
        .reduce(
            || vec![0u64; n],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
                a
            },
        );
    BitChannelStats {
        errors,
        trials: end - start,
    }
}

pub fn mc_stats(
    n: usize,
    channel: ChannelKind,
    ebno_db: f64,
    rate: f64,
    trials: u64,
    seed: u64,
) -> Result<BitChannelStats> {
    if trials == 0 {
        return Err(invalid("at least one trial is required"));
    }
    if n < 2 || !n.is_power_of_two() {
        return Err(invalid(format!("N={n} is not a power of two")));
    }
    let model = ChannelModel::new(channel, SnrAxis::EbN0.sigma2(ebno_db, rate)?)?;
    Ok(genie_error_counts(n, &model, seed, 0, trials))
}

/// Ranks bit channels by genie-aided error count, ascending; ties by index.
pub fn mc_sequence(
    n: usize,
    channel: ChannelKind,
    ebno_db: f64,
    rate: f64,
    trials: u64,
    seed: u64,
) -> Result<ReliabilitySequence> {
    let stats = mc_stats(n, channel, ebno_db, rate, trials, seed)?;
    Ok(mc_sequence_from_stats(&stats, channel, ebno_db, rate, seed))
}

pub fn mc_sequence_from_stats(
    stats: &BitChannelStats,
    channel: ChannelKind,
    ebno_db: f64,
    rate: f64,
    seed: u64,
) -> ReliabilitySequence {
    let mut order: Vec<usize> = (0..stats.errors.len()).collect();
    order.sort_by_key(|&i| (stats.errors[i], i));
    ReliabilitySequence::new(
        order,
        Provenance::Mc {
            channel,
            ebno_db,
            rate,
            trials: stats.trials,
            seed,
        },
    )
    .expect("sorted indices form a permutation")
}
