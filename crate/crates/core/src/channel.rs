//! BPSK over AWGN or Rayleigh fading, with coherent LLR demodulation.
//!
//! Sign convention: bit 0 maps to +1 and a positive LLR favours bit 0.
//! Randomness is drawn from counter-based streams, one per frame index, so a
//! `(seed, frame)` pair fixes every draw no matter which worker runs it.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::invalid;
use crate::{Bit, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelKind {
    Awgn,
    Rayleigh,
}

impl ChannelKind {
    pub fn id(&self) -> &'static str {
        match self {
            ChannelKind::Awgn => "awgn",
            ChannelKind::Rayleigh => "rayleigh",
        }
    }
}

impl fmt::Display for ChannelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for ChannelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "awgn" => Ok(ChannelKind::Awgn),
            "rayleigh" => Ok(ChannelKind::Rayleigh),
            other => Err(invalid(format!("unknown channel {other:?}"))),
        }
    }
}

/// Which energy the dB axis refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SnrAxis {
    /// Energy per information bit, normalized by the code rate.
    #[default]
    EbN0,
    /// Energy per BPSK symbol.
    EsN0,
}

impl SnrAxis {
    pub fn id(&self) -> &'static str {
        match self {
            SnrAxis::EbN0 => "ebn0",
            SnrAxis::EsN0 => "esn0",
        }
    }

    pub fn sigma2(&self, snr_db: f64, rate: f64) -> Result<f64> {
        match self {
            SnrAxis::EbN0 => ebno_db_to_sigma2(snr_db, rate),
            SnrAxis::EsN0 => Ok(1.0 / (2.0 * 10f64.powf(snr_db / 10.0))),
        }
    }
}

/// Per-dimension noise variance for BPSK at the given Eb/N0 and code rate.
pub fn ebno_db_to_sigma2(ebno_db: f64, rate: f64) -> Result<f64> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(invalid(format!("rate {rate} outside (0, 1]")));
    }
    Ok(1.0 / (2.0 * rate * 10f64.powf(ebno_db / 10.0)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelModel {
    pub kind: ChannelKind,
    pub sigma2: f64,
}

impl ChannelModel {
    pub fn new(kind: ChannelKind, sigma2: f64) -> Result<Self> {
        if sigma2.is_nan() || sigma2 <= 0.0 {
            return Err(invalid(format!("noise variance {sigma2} must be positive")));
        }
        Ok(Self { kind, sigma2 })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReceivedFrame {
    pub y: Vec<f64>,
    pub gains: Vec<f64>,
}

pub fn bpsk_modulate(bits: &[Bit]) -> Vec<f64> {
    bits.iter()
        .map(|&b| if b == 0 { 1.0 } else { -1.0 })
        .collect()
}

/// Rayleigh amplitude with `E[h²] = 1`.
fn rayleigh_gain<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let a: f64 = rng.sample(StandardNormal);
    let b: f64 = rng.sample(StandardNormal);
    ((a * a + b * b) / 2.0).sqrt()
}

pub fn transmit<R: Rng + ?Sized>(
    symbols: &[f64],
    model: &ChannelModel,
    rng: &mut R,
) -> ReceivedFrame {
    let sigma = model.sigma2.sqrt();
    let mut y = Vec::with_capacity(symbols.len());
    let mut gains = Vec::with_capacity(symbols.len());
    for &s in symbols {
        let h = match model.kind {
            ChannelKind::Awgn => 1.0,
            ChannelKind::Rayleigh => rayleigh_gain(rng),
        };
        let noise: f64 = rng.sample(StandardNormal);
        y.push(h * s + sigma * noise);
        gains.push(h);
    }
    ReceivedFrame { y, gains }
}

/// `LLR_i = 2 h_i y_i / σ²` (perfect CSI).
pub fn llr_demodulate(frame: &ReceivedFrame, sigma2: f64) -> Vec<f64> {
    frame
        .y
        .iter()
        .zip(&frame.gains)
        .map(|(&y, &h)| 2.0 * h * y / sigma2)
        .collect()
}

pub fn hard_decision(llrs: &[f64]) -> Vec<Bit> {
    llrs.iter().map(|&l| (l < 0.0) as Bit).collect()
}

/// Independent random stream for one frame of one simulation.
pub fn frame_rng(seed: u64, frame: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(frame);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modulation() {
        assert_eq!(bpsk_modulate(&[0, 1, 0]), vec![1.0, -1.0, 1.0]);
        assert_eq!(bpsk_modulate(&[0; 4]), vec![1.0; 4]);
    }

    #[test]
    fn noiseless_round_trip() {
        let bits = vec![0, 1, 1, 0, 1, 0, 0, 1];
        let model = ChannelModel::new(ChannelKind::Awgn, 1e-30).unwrap();
        let frame = transmit(&bpsk_modulate(&bits), &model, &mut frame_rng(1, 0));
        for (y, s) in frame.y.iter().zip(bpsk_modulate(&bits)) {
            assert!((y - s).abs() < 1e-12);
        }
        assert_eq!(hard_decision(&llr_demodulate(&frame, model.sigma2)), bits);
    }

    #[test]
    fn llr_formula() {
        let f = |y: f64, h: f64, s2: f64| {
            llr_demodulate(
                &ReceivedFrame {
                    y: vec![y],
                    gains: vec![h],
                },
                s2,
            )[0]
        };
        assert_eq!(f(0.5, 1.0, 0.25), 4.0);
        assert_eq!(f(0.0, 1.0, 0.7), 0.0);
        assert_eq!(f(1.0, 0.5, 1.0), 1.0);
    }

    #[test]
    fn snr_conversion() {
        assert!((ebno_db_to_sigma2(0.0, 0.5).unwrap() - 1.0).abs() < 1e-15);
        let a = ebno_db_to_sigma2(1.0, 0.25).unwrap();
        let b = ebno_db_to_sigma2(1.0 + 10.0 * 2f64.log10(), 0.25).unwrap();
        assert!((a / b - 2.0).abs() < 1e-12);
        assert!(ebno_db_to_sigma2(300.0, 0.5).unwrap() < 1e-29);
        assert!(ebno_db_to_sigma2(0.0, 0.0).is_err());
        assert!(ebno_db_to_sigma2(0.0, 1.5).is_err());
        assert!((SnrAxis::EsN0.sigma2(0.0, 0.1).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn same_stream_same_frame() {
        let s = bpsk_modulate(&[0; 64]);
        let m = ChannelModel::new(ChannelKind::Rayleigh, 0.5).unwrap();
        let a = transmit(&s, &m, &mut frame_rng(7, 3));
        let b = transmit(&s, &m, &mut frame_rng(7, 3));
        let c = transmit(&s, &m, &mut frame_rng(7, 4));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn rayleigh_unit_power() {
        let mut rng = frame_rng(11, 0);
        let n = 1_000_000;
        let mean: f64 = (0..n).map(|_| rayleigh_gain(&mut rng).powi(2)).sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.01, "E[h^2] = {mean}");
    }

    #[test]
    fn awgn_noise_variance() {
        let sigma2 = 0.3;
        let m = ChannelModel::new(ChannelKind::Awgn, sigma2).unwrap();
        let s = vec![1.0; 1000];
        let mut acc = 0.0;
        let mut count = 0usize;
        for frame in 0..1000 {
            let r = transmit(&s, &m, &mut frame_rng(5, frame));
            for y in r.y {
                acc += (y - 1.0).powi(2);
                count += 1;
            }
        }
        let var = acc / count as f64;
        assert!((var / sigma2 - 1.0).abs() < 0.01, "variance {var}");
    }

    #[test]
    fn llr_sign_matches_likelihood() {
        let m = ChannelModel::new(ChannelKind::Rayleigh, 0.8).unwrap();
        let r = transmit(&bpsk_modulate(&[0; 256]), &m, &mut frame_rng(2, 9));
        let llr = llr_demodulate(&r, m.sigma2);
        for ((l, y), h) in llr.iter().zip(&r.y).zip(&r.gains) {
            let p0 = (-(y - h).powi(2) / (2.0 * m.sigma2)).exp();
            let p1 = (-(y + h).powi(2) / (2.0 * m.sigma2)).exp();
            assert_eq!(*l > 0.0, p0 > p1);
        }
    }

    #[test]
    fn parse_kind() {
        assert_eq!("AWGN".parse::<ChannelKind>().unwrap(), ChannelKind::Awgn);
        assert_eq!(
            "rayleigh".parse::<ChannelKind>().unwrap(),
            ChannelKind::Rayleigh
        );
        assert!("bsc".parse::<ChannelKind>().is_err());
        assert!(ChannelModel::new(ChannelKind::Awgn, 0.0).is_err());
    }
}
