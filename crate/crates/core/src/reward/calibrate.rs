//! Training-SNR calibration: find the SNR at which a reference code hits a
//! target BLER, by bisection on the dB axis.

use serde::{Deserialize, Serialize};

use super::{estimate_bler, snr_to_millidb, BlerEstimate, SimSetup, StopRule};
use crate::construction::ReliabilitySequence;
use crate::digest::derive_seed;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub target_bler: f64,
    pub lo_db: f64,
    pub hi_db: f64,
    /// Accept a probe whose BLER lies in `[target/band, target·band]` once
    /// its stop rule is met (enough errors, or the frame budget spent).
    pub band: f64,
    pub max_probes: usize,
    pub stop: StopRule,
    pub seed: u64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            target_bler: 0.01,
            lo_db: -10.0,
            hi_db: 20.0,
            band: 2.0,
            max_probes: 40,
            stop: StopRule::default(),
            seed: 0,
        }
    }
}

impl CalibrationConfig {
    fn accepts(&self, est: &BlerEstimate) -> bool {
        let b = est.bler();
        b >= self.target_bler / self.band
            && b <= self.target_bler * self.band
            && (est.errors >= self.stop.target_errors || est.frames >= self.stop.max_frames)
    }
}

/// Bisects the SNR until the measured BLER of the length-`k` prefix of
/// `seq` falls in the accepted band; returns that probe's SNR in dB
/// (rounded to milli-dB).
pub fn calibrate_training_snr(
    seq: &ReliabilitySequence,
    k: usize,
    setup: &SimSetup,
    cfg: &CalibrationConfig,
) -> Result<f64> {
    let info = seq.info_set(k)?;
    let probe = |snr: f64| -> Result<BlerEstimate> {
        let seed = derive_seed(cfg.seed, &format!("calibrate/{k}/{}", snr_to_millidb(snr)));
        estimate_bler(info, setup, snr, &cfg.stop, seed)
    };
    let round = |snr: f64| snr_to_millidb(snr) as f64 / 1000.0;
    let (mut lo, mut hi) = (round(cfg.lo_db), round(cfg.hi_db));
    let at_lo = probe(lo)?;
    if cfg.accepts(&at_lo) {
        return Ok(lo);
    }
    let at_hi = probe(hi)?;
    if cfg.accepts(&at_hi) {
        return Ok(hi);
    }
    if at_lo.bler() < cfg.target_bler || at_hi.bler() > cfg.target_bler {
        return Err(Error::Bracket {
            lo_db: lo,
            hi_db: hi,
            target: cfg.target_bler,
            bler_lo: at_lo.bler(),
            bler_hi: at_hi.bler(),
        });
    }
    let mut last = (lo, at_lo.bler());
    for _ in 0..cfg.max_probes {
        let mid = round(0.5 * (lo + hi));
        if mid <= lo || mid >= hi {
            break;
        }
        let est = probe(mid)?;
        log::debug!(
            "calibrate k={k}: {mid:.3} dB -> bler {:.5} ({} frames)",
            est.bler(),
            est.frames
        );
        if cfg.accepts(&est) {
            return Ok(mid);
        }
        last = (mid, est.bler());
        if est.bler() > cfg.target_bler {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::NoConvergence {
        iterations: cfg.max_probes,
        last_db: last.0,
        last_bler: last.1,
    })
}

/// Calibrates every requested rate against `seq`.
pub fn calibrate_rate_snrs(
    seq: &ReliabilitySequence,
    ks: &[usize],
    setup: &SimSetup,
    cfg: &CalibrationConfig,
) -> Vec<(usize, Result<f64>)> {
    ks.iter()
        .map(|&k| (k, calibrate_training_snr(seq, k, setup, cfg)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{ChannelKind, SnrAxis};
    use crate::code::CrcConfig;
    use crate::construction::nr_sequence;
    use crate::decoder::DecoderConfig;

    fn setup() -> SimSetup {
        SimSetup {
            n: 16,
            crc: CrcConfig::NONE,
            channel: ChannelKind::Awgn,
            axis: SnrAxis::EbN0,
            decoder: DecoderConfig::sc(),
        }
    }

    #[test]
    fn bracket_must_straddle() {
        let seq = nr_sequence(16).unwrap();
        let cfg = CalibrationConfig {
            lo_db: 15.0,
            hi_db: 20.0,
            ..Default::default()
        };
        let err = calibrate_training_snr(&seq, 8, &setup(), &cfg).unwrap_err();
        assert!(matches!(err, Error::Bracket { .. }), "{err}");
    }

    #[test]
    fn early_exit_on_bracket_endpoint() {
        let seq = nr_sequence(16).unwrap();
        let cfg = CalibrationConfig::default();
        let snr = calibrate_training_snr(&seq, 8, &setup(), &cfg).unwrap();
        // Re-probing exactly that point must be accepted immediately.
        let again = CalibrationConfig { lo_db: snr, ..cfg };
        assert_eq!(
            calibrate_training_snr(&seq, 8, &setup(), &again).unwrap(),
            snr
        );
    }

    #[test]
    fn higher_rate_needs_more_snr() {
        let seq = nr_sequence(16).unwrap();
        let cfg = CalibrationConfig::default();
        let half = calibrate_training_snr(&seq, 8, &setup(), &cfg).unwrap();
        let full = calibrate_training_snr(&seq, 16, &setup(), &cfg).unwrap();
        assert!(full > half, "rate 1: {full} dB, rate 1/2: {half} dB");
    }
}
