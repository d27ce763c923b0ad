//! Monte-Carlo BLER estimation and the rewards built on it.
//!
//! Frame `i` of a simulation with seed `s` always uses the random stream
//! `(s, i)`, so estimates do not depend on how frames are spread over
//! workers, and shards over disjoint frame ranges merge exactly. The stop
//! point is the first frame at which the error target is reached, scanned
//! in frame order.

mod cache;
mod calibrate;

use std::fmt;
use std::ops::Range;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{
    bpsk_modulate, frame_rng, llr_demodulate, transmit, ChannelKind, ChannelModel, SnrAxis,
};
use crate::code::{CodeConfig, CrcConfig};
use crate::decoder::{decode, DecoderConfig};
use crate::digest::{derive_seed, short_digest};
use crate::error::invalid;
use crate::{Bit, Result};

pub use cache::RewardCache;
pub use calibrate::{calibrate_rate_snrs, calibrate_training_snr, CalibrationConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StopRule {
    pub target_errors: u64,
    pub max_frames: u64,
}

impl StopRule {
    /// Exactly `frames` frames, no early stop.
    pub fn fixed(frames: u64) -> Self {
        Self {
            target_errors: u64::MAX,
            max_frames: frames,
        }
    }

    pub fn digest(&self) -> String {
        short_digest(&format!(
            "errors={};frames={}",
            self.target_errors, self.max_frames
        ))
    }
}

impl Default for StopRule {
    fn default() -> Self {
        Self {
            target_errors: 100,
            max_frames: 100_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlerEstimate {
    pub errors: u64,
    pub frames: u64,
}

impl BlerEstimate {
    pub fn bler(&self) -> f64 {
        self.errors as f64 / self.frames as f64
    }

    pub fn stderr(&self) -> f64 {
        let p = self.bler();
        (p * (1.0 - p) / self.frames as f64).sqrt()
    }

    pub fn merge(&self, other: &BlerEstimate) -> BlerEstimate {
        BlerEstimate {
            errors: self.errors + other.errors,
            frames: self.frames + other.frames,
        }
    }
}

/// Everything about a simulated link except the information set and SNR.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SimSetup {
    pub n: usize,
    pub crc: CrcConfig,
    pub channel: ChannelKind,
    pub axis: SnrAxis,
    pub decoder: DecoderConfig,
}

impl SimSetup {
    /// Digest over decoder, CRC and SNR axis (the cache's decoder field).
    pub fn decoder_digest(&self) -> String {
        short_digest(&format!(
            "{};crc={};axis={}",
            self.decoder.canonical(),
            self.crc.label(),
            self.axis.id()
        ))
    }

    pub fn code(&self, info_set: &[usize]) -> Result<CodeConfig> {
        if info_set.is_empty() {
            return Err(invalid("empty information set"));
        }
        CodeConfig::from_info_set(self.n, info_set, self.crc)
    }

    pub fn channel_model(&self, code: &CodeConfig, snr_db: f64) -> Result<ChannelModel> {
        ChannelModel::new(self.channel, self.axis.sigma2(snr_db, code.rate())?)
    }
}

fn random_bits<R: Rng>(rng: &mut R, len: usize) -> Vec<Bit> {
    let mut out = Vec::with_capacity(len);
    while out.len() < len {
        let word: u64 = rng.random();
        for b in 0..64.min(len - out.len()) {
            out.push((word >> b & 1) as Bit);
        }
    }
    out
}

/// Simulates one frame; true on a payload error.
pub fn simulate_frame(
    code: &CodeConfig,
    model: &ChannelModel,
    decoder: &DecoderConfig,
    seed: u64,
    frame: u64,
) -> Result<bool> {
    let mut rng = frame_rng(seed, frame);
    let payload = random_bits(&mut rng, code.payload_len());
    let x = code.encode(&payload)?;
    let rx = transmit(&bpsk_modulate(&x), model, &mut rng);
    let llrs = llr_demodulate(&rx, model.sigma2);
    Ok(decode(&llrs, code, decoder)?.payload != payload)
}

fn frame_errors(
    code: &CodeConfig,
    model: &ChannelModel,
    decoder: &DecoderConfig,
    seed: u64,
    frames: Range<u64>,
) -> Result<Vec<bool>> {
    frames
        .into_par_iter()
        .map(|f| simulate_frame(code, model, decoder, seed, f))
        .collect()
}

/// Errors over an exact frame range; shards over disjoint ranges merge.
pub fn count_errors(
    info_set: &[usize],
    setup: &SimSetup,
    snr_db: f64,
    seed: u64,
    frames: Range<u64>,
) -> Result<BlerEstimate> {
    let code = setup.code(info_set)?;
    let model = setup.channel_model(&code, snr_db)?;
    let count = frames.end.saturating_sub(frames.start);
    let errors = frame_errors(&code, &model, &setup.decoder, seed, frames)?
        .into_iter()
        .filter(|&e| e)
        .count() as u64;
    Ok(BlerEstimate {
        errors,
        frames: count,
    })
}

/// BLER with the given stop rule. Deterministic in `seed`.
pub fn estimate_bler(
    info_set: &[usize],
    setup: &SimSetup,
    snr_db: f64,
    stop: &StopRule,
    seed: u64,
) -> Result<BlerEstimate> {
    if stop.max_frames == 0 {
        return Err(invalid("stop rule allows no frames"));
    }
    let code = setup.code(info_set)?;
    let model = setup.channel_model(&code, snr_db)?;
    let mut errors = 0u64;
    let mut done = 0u64;
    let mut chunk = 64u64;
    while done < stop.max_frames {
        let end = (done + chunk).min(stop.max_frames);
        for e in frame_errors(&code, &model, &setup.decoder, seed, done..end)? {
            done += 1;
            errors += e as u64;
            if errors >= stop.target_errors {
                return Ok(BlerEstimate {
                    errors,
                    frames: done,
                });
            }
        }
        chunk = (chunk * 2).min(8192);
    }
    Ok(BlerEstimate {
        errors,
        frames: done,
    })
}

/// Info set as a big-endian hex bitmask over `n` bits (bit `i` = index `i`).
pub fn mask_hex(n: usize, info_set: &[usize]) -> String {
    let digits = n.div_ceil(4);
    let mut nibbles = vec![0u8; digits];
    for &i in info_set {
        nibbles[digits - 1 - i / 4] |= 1 << (i % 4);
    }
    nibbles.iter().map(|v| format!("{v:x}")).collect()
}

pub fn snr_to_millidb(snr_db: f64) -> i64 {
    (snr_db * 1000.0).round() as i64
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RewardKey {
    pub mask: String,
    pub channel: ChannelKind,
    pub snr_millidb: i64,
    pub decoder_digest: String,
    pub stop_digest: String,
}

impl RewardKey {
    pub fn new(setup: &SimSetup, info_set: &[usize], snr_db: f64, stop: &StopRule) -> Self {
        Self {
            mask: mask_hex(setup.n, info_set),
            channel: setup.channel,
            snr_millidb: snr_to_millidb(snr_db),
            decoder_digest: setup.decoder_digest(),
            stop_digest: stop.digest(),
        }
    }
}

impl fmt::Display for RewardKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} {} {}",
            self.mask, self.channel, self.snr_millidb, self.decoder_digest, self.stop_digest
        )
    }
}

/// Per-rate weights `c_k` and training SNRs, both indexed by `k - 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateWeights {
    pub weights: Vec<f64>,
    pub snr_db: Vec<f64>,
}

impl RateWeights {
    pub fn new(weights: Vec<f64>, snr_db: Vec<f64>) -> Result<Self> {
        if weights.len() != snr_db.len() {
            return Err(invalid("weights and SNR table differ in length"));
        }
        if weights.iter().any(|&c| !c.is_finite() || c < 0.0) {
            return Err(invalid("weights must be finite and nonnegative"));
        }
        if !weights.iter().any(|&c| c > 0.0) {
            return Err(invalid("at least one weight must be positive"));
        }
        Ok(Self { weights, snr_db })
    }

    /// `c_k = 1` for every rate.
    pub fn joint(snr_db: Vec<f64>) -> Result<Self> {
        Self::new(vec![1.0; snr_db.len()], snr_db)
    }

    /// `c_k = 1` everywhere except `c_target = weight`.
    pub fn target_rate(snr_db: Vec<f64>, target_k: usize, weight: f64) -> Result<Self> {
        let mut w = vec![1.0; snr_db.len()];
        if target_k == 0 || target_k > w.len() {
            return Err(invalid(format!("target K={target_k} out of range")));
        }
        w[target_k - 1] = weight;
        Self::new(w, snr_db)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weight(&self, k: usize) -> f64 {
        self.weights[k - 1]
    }

    pub fn snr(&self, k: usize) -> f64 {
        self.snr_db[k - 1]
    }

    /// Rates that need a simulation.
    pub fn active_rates(&self) -> Vec<usize> {
        (1..=self.len()).filter(|&k| self.weight(k) > 0.0).collect()
    }

    pub fn digest(&self) -> String {
        let text: Vec<String> = self
            .weights
            .iter()
            .zip(&self.snr_db)
            .map(|(c, s)| format!("{c}@{}", snr_to_millidb(*s)))
            .collect();
        short_digest(&text.join(","))
    }
}

/// Cached, key-seeded BLER source for training and evaluation.
///
/// The simulation seed of a key is derived from the key itself, so results
/// are identical whether or not a cache is attached.
#[derive(Clone)]
pub struct RewardEngine {
    pub setup: SimSetup,
    pub stop: StopRule,
    pub seed: u64,
    cache: Option<Arc<RewardCache>>,
}

impl RewardEngine {
    pub fn new(setup: SimSetup, stop: StopRule, seed: u64) -> Self {
        Self {
            setup,
            stop,
            seed,
            cache: None,
        }
    }

    pub fn with_cache(mut self, cache: Arc<RewardCache>) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn cache(&self) -> Option<&Arc<RewardCache>> {
        self.cache.as_ref()
    }

    pub fn key(&self, info_set: &[usize], snr_db: f64) -> RewardKey {
        RewardKey::new(&self.setup, info_set, snr_db, &self.stop)
    }

    pub fn bler(&self, info_set: &[usize], snr_db: f64) -> Result<BlerEstimate> {
        let key = self.key(info_set, snr_db);
        if let Some(hit) = self.cache.as_ref().and_then(|c| c.get(&key)) {
            return Ok(hit);
        }
        let seed = derive_seed(self.seed, &key.to_string());
        let snr = key.snr_millidb as f64 / 1000.0;
        let est = estimate_bler(info_set, &self.setup, snr, &self.stop, seed)?;
        match &self.cache {
            Some(cache) => Ok(cache.put(key, est)?),
            None => Ok(est),
        }
    }

    /// Several lookups at once. Misses are simulated in parallel but stored
    /// in request order, so a cache file grows identically on every run.
    pub fn bler_many(&self, requests: &[(&[usize], f64)]) -> Result<Vec<BlerEstimate>> {
        let keys: Vec<RewardKey> = requests
            .iter()
            .map(|(info, snr)| self.key(info, *snr))
            .collect();
        let mut out: Vec<Option<BlerEstimate>> = keys
            .iter()
            .map(|k| self.cache.as_ref().and_then(|c| c.get(k)))
            .collect();
        let mut missing: Vec<usize> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (i, hit) in out.iter().enumerate() {
            if hit.is_none() && seen.insert(&keys[i]) {
                missing.push(i);
            }
        }
        let fresh: Vec<BlerEstimate> = missing
            .par_iter()
            .map(|&i| {
                let seed = derive_seed(self.seed, &keys[i].to_string());
                let snr = keys[i].snr_millidb as f64 / 1000.0;
                estimate_bler(requests[i].0, &self.setup, snr, &self.stop, seed)
            })
            .collect::<Result<_>>()?;
        let mut computed = std::collections::HashMap::new();
        for (&i, est) in missing.iter().zip(fresh) {
            let est = match &self.cache {
                Some(cache) => cache.put(keys[i].clone(), est)?,
                None => est,
            };
            computed.insert(&keys[i], est);
        }
        for (i, slot) in out.iter_mut().enumerate() {
            if slot.is_none() {
                *slot = Some(computed[&keys[i]]);
            }
        }
        Ok(out.into_iter().map(|e| e.expect("filled above")).collect())
    }

    /// `-c_k · BLER` of the prefix, skipping the simulation when `c_k = 0`.
    pub fn reward(&self, info_set: &[usize], weights: &RateWeights) -> Result<f64> {
        let k = info_set.len();
        if k == 0 || k > weights.len() {
            return Err(invalid(format!("prefix length {k} has no weight")));
        }
        let c = weights.weight(k);
        if c == 0.0 {
            return Ok(0.0);
        }
        Ok(-c * self.bler(info_set, weights.snr(k))?.bler())
    }

    /// `Σ_k c_k J_k` over every prefix of `order`.
    pub fn objective(&self, order: &[usize], weights: &RateWeights) -> Result<f64> {
        let mut total = 0.0;
        for k in 1..=order.len().min(weights.len()) {
            total -= self.reward(&order[..k], weights)?;
        }
        Ok(total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::construction::nr_sequence;

    fn awgn_sc(n: usize) -> SimSetup {
        SimSetup {
            n,
            crc: CrcConfig::NONE,
            channel: ChannelKind::Awgn,
            axis: SnrAxis::EbN0,
            decoder: DecoderConfig::sc(),
        }
    }

    #[test]
    fn estimate_properties() {
        let e = BlerEstimate {
            errors: 10,
            frames: 1000,
        };
        assert_eq!(e.bler(), 0.01);
        assert!((e.stderr() - (0.01f64 * 0.99 / 1000.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn noiseless_has_no_errors() {
        let setup = awgn_sc(16);
        let seq = nr_sequence(16).unwrap();
        let est = estimate_bler(
            seq.info_set(8).unwrap(),
            &setup,
            200.0,
            &StopRule::fixed(500),
            1,
        )
        .unwrap();
        assert_eq!(
            est,
            BlerEstimate {
                errors: 0,
                frames: 500
            }
        );
    }

    #[test]
    fn rate_one_saturates_at_low_snr() {
        let setup = awgn_sc(16);
        let all: Vec<usize> = (0..16).collect();
        let est = estimate_bler(&all, &setup, -20.0, &StopRule::fixed(300), 1).unwrap();
        assert!(est.bler() > 0.99);
    }

    #[test]
    fn stop_rule_and_determinism() {
        let setup = awgn_sc(16);
        let seq = nr_sequence(16).unwrap();
        let info = seq.info_set(12).unwrap();
        let stop = StopRule {
            target_errors: 50,
            max_frames: 100_000,
        };
        let a = estimate_bler(info, &setup, 1.0, &stop, 5).unwrap();
        let b = estimate_bler(info, &setup, 1.0, &stop, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.errors, 50);
        // The stopping frame is itself an error.
        let before = count_errors(info, &setup, 1.0, 5, 0..a.frames - 1).unwrap();
        assert_eq!(before.errors, 49);
        assert!(estimate_bler(&[], &setup, 1.0, &stop, 5).is_err());
    }

    #[test]
    fn shards_merge_exactly() {
        let setup = awgn_sc(16);
        let seq = nr_sequence(16).unwrap();
        let info = seq.info_set(10).unwrap();
        let whole = count_errors(info, &setup, 2.0, 9, 0..20_000).unwrap();
        let merged = (0..10)
            .map(|s| count_errors(info, &setup, 2.0, 9, s * 2000..(s + 1) * 2000).unwrap())
            .fold(
                BlerEstimate {
                    errors: 0,
                    frames: 0,
                },
                |a, b| a.merge(&b),
            );
        assert_eq!(whole, merged);
        let fixed = estimate_bler(info, &setup, 2.0, &StopRule::fixed(20_000), 9).unwrap();
        assert_eq!(fixed, whole);
    }

    #[test]
    fn mask_encoding() {
        assert_eq!(mask_hex(8, &[0]), "01");
        assert_eq!(mask_hex(8, &[7, 3]), "88");
        assert_eq!(mask_hex(16, &[15, 14, 13, 11]), "e800");
        assert_ne!(mask_hex(8, &[0, 1]), mask_hex(8, &[0, 2]));
    }

    #[test]
    fn reward_weights() {
        let w = RateWeights::new(vec![0.0, 1.0, 10.0], vec![0.0; 3]).unwrap();
        assert_eq!(w.active_rates(), vec![2, 3]);
        assert!(RateWeights::new(vec![0.0; 3], vec![0.0; 3]).is_err());
        assert!(RateWeights::new(vec![-1.0, 1.0], vec![0.0; 2]).is_err());
        let t = RateWeights::target_rate(vec![1.0; 8], 4, 10.0).unwrap();
        assert_eq!(t.weight(4), 10.0);
        assert_eq!(t.weight(3), 1.0);
    }

    #[test]
    fn zero_weight_skips_simulation() {
        let cache = Arc::new(RewardCache::in_memory());
        let engine =
            RewardEngine::new(awgn_sc(8), StopRule::fixed(100), 1).with_cache(cache.clone());
        let w =
            RateWeights::new(vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0], vec![3.0; 8]).unwrap();
        assert_eq!(engine.reward(&[7, 6], &w).unwrap(), 0.0);
        assert_eq!(cache.len(), 0);
        let r = engine.reward(&[7, 6, 5], &w).unwrap();
        assert!(r <= 0.0);
        assert_eq!(cache.len(), 1);
    }

    #[test]
    fn reward_scales_with_weight() {
        let engine = RewardEngine::new(awgn_sc(8), StopRule::fixed(2000), 4);
        let info = [7, 6, 5, 3];
        let bler = engine.bler(&info, 1.0).unwrap().bler();
        assert!(bler > 0.0);
        let mut w = vec![1.0; 8];
        let one = RateWeights::new(w.clone(), vec![1.0; 8]).unwrap();
        w[3] = 10.0;
        let ten = RateWeights::new(w, vec![1.0; 8]).unwrap();
        assert_eq!(engine.reward(&info, &one).unwrap(), -bler);
        assert!((engine.reward(&info, &ten).unwrap() + 10.0 * bler).abs() < 1e-15);
    }

    #[test]
    fn batched_lookup_matches_single() {
        let setup = awgn_sc(8);
        let plain = RewardEngine::new(setup, StopRule::fixed(500), 3);
        let cached = plain.clone().with_cache(Arc::new(RewardCache::in_memory()));
        let a: &[usize] = &[7, 6];
        let b: &[usize] = &[7, 6, 5];
        let reqs = [(a, 2.0), (b, 2.0), (a, 2.0), (a, 1.0)];
        let many = cached.bler_many(&reqs).unwrap();
        assert_eq!(cached.cache().unwrap().len(), 3);
        for ((info, snr), est) in reqs.iter().zip(&many) {
            assert_eq!(plain.bler(info, *snr).unwrap(), *est);
        }
        assert_eq!(cached.bler_many(&reqs).unwrap(), many);
    }

    #[test]
    fn cache_is_transparent() {
        let setup = awgn_sc(8);
        let plain = RewardEngine::new(setup, StopRule::default(), 3);
        let cached = plain.clone().with_cache(Arc::new(RewardCache::in_memory()));
        for info in [&[7usize, 6][..], &[7, 6, 5, 3], &[7, 6, 5]] {
            assert_eq!(
                plain.bler(info, 2.0).unwrap(),
                cached.bler(info, 2.0).unwrap()
            );
            assert_eq!(
                plain.bler(info, 2.0).unwrap(),
                cached.bler(info, 2.0).unwrap()
            );
        }
    }
}
