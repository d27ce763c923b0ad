//! Declarative training recipes (TOML) and what they resolve to.

use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use polarseq_core::channel::{ChannelKind, SnrAxis};
use polarseq_core::code::CrcConfig;
use polarseq_core::construction::ReliabilitySequence;
use polarseq_core::decoder::{DecoderConfig, Metric};
use polarseq_core::digest::short_digest;
use polarseq_core::reward::{
    calibrate_training_snr, CalibrationConfig, RateWeights, RewardCache, RewardEngine, SimSetup,
    StopRule,
};
use polarseq_policy::{PolicyConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::scheme::Scheme;

fn awgn() -> ChannelKind {
    ChannelKind::Awgn
}
fn crc_off() -> String {
    "off".into()
}
fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodeSection {
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(default = "awgn")]
    pub channel: ChannelKind,
    #[serde(default = "crc_off")]
    pub crc: String,
    #[serde(default = "one")]
    pub list_size: usize,
    #[serde(default)]
    pub metric: Metric,
    #[serde(default)]
    pub axis: SnrAxis,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightMode {
    /// `c_k = 1` for every rate.
    Joint,
    /// `c_k = 1` except `c_target`.
    Target,
}

fn ten() -> f64 {
    10.0
}
fn target_bler() -> f64 {
    0.01
}
fn nr() -> String {
    "nr".into()
}
fn hundred() -> u64 {
    100
}
fn lakh() -> u64 {
    100_000
}
fn lo_db() -> f64 {
    -10.0
}
fn hi_db() -> f64 {
    20.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardSection {
    pub mode: WeightMode,
    #[serde(default)]
    pub target_k: Option<usize>,
    #[serde(default = "ten")]
    pub target_weight: f64,
    /// BLER the reference sequence should reach at each rate's SNR.
    #[serde(default = "target_bler")]
    pub target_bler: f64,
    /// Scheme whose prefixes set the per-rate training SNRs.
    #[serde(default = "nr")]
    pub reference: String,
    #[serde(default = "hundred")]
    pub stop_errors: u64,
    #[serde(default = "lakh")]
    pub stop_frames: u64,
    #[serde(default = "hundred")]
    pub calibration_errors: u64,
    #[serde(default = "lakh")]
    pub calibration_frames: u64,
    #[serde(default = "lo_db")]
    pub calibration_lo_db: f64,
    #[serde(default = "hi_db")]
    pub calibration_hi_db: f64,
    /// Skip calibration and use these SNRs (dB), indexed by `k - 1`.
    #[serde(default)]
    pub snr_db: Option<Vec<f64>>,
    #[serde(default)]
    pub seed: u64,
}

fn d64() -> usize {
    64
}
fn two() -> usize {
    2
}
fn four() -> usize {
    4
}
fn ff() -> usize {
    256
}
fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySection {
    #[serde(default = "d64")]
    pub d: usize,
    #[serde(default = "two")]
    pub layers: usize,
    #[serde(default = "four")]
    pub heads: usize,
    #[serde(default = "ff")]
    pub ff_hidden: usize,
    #[serde(default = "yes")]
    pub use_positional_encoding: bool,
    #[serde(default)]
    pub seed: u64,
}

impl Default for PolicySection {
    fn default() -> Self {
        Self {
            d: d64(),
            layers: two(),
            heads: four(),
            ff_hidden: ff(),
            use_positional_encoding: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub code: CodeSection,
    pub reward: RewardSection,
    #[serde(default)]
    pub policy: PolicySection,
    #[serde(default)]
    pub train: TrainConfig,
}

pub fn decoder_for(list_size: usize, crc: &CrcConfig, metric: Metric) -> DecoderConfig {
    DecoderConfig {
        list_size,
        metric,
        crc_aided: list_size > 1 && crc.is_enabled(),
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: Self =
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.policy_config().validate()?;
        self.train.validate(self.code.n)?;
        self.crc()?;
        if self.reward.mode == WeightMode::Target {
            let lo = self.crc()?.length + 1;
            match self.reward.target_k {
                Some(k) if (lo..=self.code.n).contains(&k) => {}
                _ => bail!("target mode needs target_k in {lo}..={}", self.code.n),
            }
        }
        if let Some(s) = &self.reward.snr_db {
            if s.len() != self.episode_len() {
                bail!(
                    "snr_db has {} entries, episodes have {}",
                    s.len(),
                    self.episode_len()
                );
            }
        }
        Ok(())
    }

    /// Digest of the whole recipe.
    pub fn digest(&self) -> String {
        short_digest(&serde_json::to_string(self).expect("config serializes"))
    }

    pub fn episode_len(&self) -> usize {
        self.train.episode_len(self.code.n)
    }

    pub fn crc(&self) -> Result<CrcConfig> {
        Ok(CrcConfig::parse(&self.code.crc)?)
    }

    pub fn setup(&self) -> Result<SimSetup> {
        let crc = self.crc()?;
        Ok(SimSetup {
            n: self.code.n,
            crc,
            channel: self.code.channel,
            axis: self.code.axis,
            decoder: decoder_for(self.code.list_size, &crc, self.code.metric),
        })
    }

    pub fn policy_config(&self) -> PolicyConfig {
        let p = &self.policy;
        PolicyConfig {
            n: self.code.n,
            d: p.d,
            layers: p.layers,
            heads: p.heads,
            ff_hidden: p.ff_hidden,
            use_positional_encoding: p.use_positional_encoding,
            seed: p.seed,
        }
    }

    pub fn training_stop(&self) -> StopRule {
        StopRule {
            target_errors: self.reward.stop_errors,
            max_frames: self.reward.stop_frames,
        }
    }

    pub fn engine(&self, cache: Option<Arc<RewardCache>>) -> Result<RewardEngine> {
        let engine = RewardEngine::new(self.setup()?, self.training_stop(), self.reward.seed);
        Ok(match cache {
            Some(c) => engine.with_cache(c),
            None => engine,
        })
    }

    /// Raw per-rate weights (before any rate stride). Prefixes too short to
    /// hold the CRC carry no payload and get weight 0.
    pub fn weight_vector(&self) -> Vec<f64> {
        let crc_len = self.crc().map(|c| c.length).unwrap_or(0);
        let mut w: Vec<f64> = (1..=self.episode_len())
            .map(|k| if k > crc_len { 1.0 } else { 0.0 })
            .collect();
        if let (WeightMode::Target, Some(k)) = (self.reward.mode, self.reward.target_k) {
            if k <= w.len() {
                w[k - 1] = self.reward.target_weight;
            }
        }
        w
    }

    /// Rates that receive a reward during training.
    pub fn rewarded_rates(&self) -> Vec<usize> {
        let w = self.weight_vector();
        (1..=w.len())
            .filter(|&k| w[k - 1] > 0.0 && k % self.train.rate_stride == 0)
            .collect()
    }

    pub fn calibration(&self) -> CalibrationConfig {
        CalibrationConfig {
            target_bler: self.reward.target_bler,
            lo_db: self.reward.calibration_lo_db,
            hi_db: self.reward.calibration_hi_db,
            stop: StopRule {
                target_errors: self.reward.calibration_errors,
                max_frames: self.reward.calibration_frames,
            },
            seed: self.reward.seed,
            ..Default::default()
        }
    }

    pub fn reference_sequence(&self) -> Result<ReliabilitySequence> {
        let scheme: Scheme = self.reward.reference.parse()?;
        scheme.sequence(self.code.n, None, self.code.channel, self.reward.seed)
    }

    /// Per-rate SNRs: either pinned in the recipe or calibrated on the
    /// reference sequence. Rates without a reward get NaN.
    pub fn rate_snrs(&self) -> Result<Vec<f64>> {
        if let Some(s) = &self.reward.snr_db {
            return Ok(s.clone());
        }
        let reference = self.reference_sequence()?;
        let setup = self.setup()?;
        let cal = self.calibration();
        let mut out = vec![f64::NAN; self.episode_len()];
        for k in self.rewarded_rates() {
            let snr = calibrate_training_snr(&reference, k, &setup, &cal)
                .with_context(|| format!("calibrating K={k}"))?;
            log::info!("calibrated K={k}: {snr:.3} dB");
            out[k - 1] = snr;
        }
        Ok(out)
    }

    pub fn weights(&self, snrs: Vec<f64>) -> Result<RateWeights> {
        Ok(RateWeights::new(self.weight_vector(), snrs)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const RECIPE: &str = r#"
[code]
N = 16

[reward]
mode = "target"
target_k = 8

[policy]
d = 16
layers = 1

[train]
epochs = 3
"#;

    #[test]
    fn parses_with_defaults() {
        let cfg: ExperimentConfig = toml::from_str(RECIPE).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.code.channel, ChannelKind::Awgn);
        assert_eq!(cfg.setup().unwrap().decoder, DecoderConfig::sc());
        assert_eq!(cfg.policy_config().heads, 4);
        assert_eq!(cfg.train.batch_size, 100);
        let w = cfg.weight_vector();
        assert_eq!(w[7], 10.0);
        assert_eq!(w.iter().filter(|&&c| c == 1.0).count(), 15);
        assert_eq!(cfg.rewarded_rates().len(), 16);
    }

    #[test]
    fn rejects_bad_recipes() {
        let no_target = RECIPE.replace("target_k = 8", "");
        let cfg: ExperimentConfig = toml::from_str(&no_target).unwrap();
        assert!(cfg.validate().is_err());
        assert!(toml::from_str::<ExperimentConfig>(&RECIPE.replace("epochs", "epoch")).is_err());
    }

    #[test]
    fn crc_only_prefixes_are_unrewarded() {
        let with_crc = RECIPE.replace("N = 16", "N = 16\ncrc = \"0x3\"\nlist_size = 4");
        let cfg: ExperimentConfig = toml::from_str(&with_crc).unwrap();
        cfg.validate().unwrap();
        assert_eq!(&cfg.weight_vector()[..5], &[0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(cfg.rewarded_rates(), (5..=16).collect::<Vec<_>>());
        let low: ExperimentConfig =
            toml::from_str(&with_crc.replace("target_k = 8", "target_k = 4")).unwrap();
        assert!(low.validate().is_err());
    }

    #[test]
    fn digest_tracks_content() {
        let a: ExperimentConfig = toml::from_str(RECIPE).unwrap();
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.policy.use_positional_encoding = false;
        assert_ne!(a.digest(), b.digest());
    }
}
