//! REINFORCE with a moving-average baseline.
//!
//! An episode starts from the empty prefix and appends one index per step.
//! The reward after step `t` is `-c_t · BLER` of the length-`t` prefix, so
//! every rate's code is nested in the next by construction.

use std::collections::BTreeMap;
use std::time::Instant;

use polarseq_core::channel::frame_rng;
use polarseq_core::construction::{Provenance, ReliabilitySequence};
use polarseq_core::digest::{derive_seed, short_digest};
use polarseq_core::reward::{RateWeights, RewardEngine};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::net::{ActionMode, PolicyConfig, PolicyParams, WeightedEpisode};
use crate::optim::{Adam, AdamConfig};
use crate::{Error, Result};

fn default_gamma() -> f64 {
    1.0
}
fn default_lr() -> f64 {
    5e-4
}
fn default_batch() -> usize {
    100
}
fn default_epochs() -> usize {
    20_000
}
fn default_beta() -> f64 {
    0.99
}
fn default_eval_every() -> usize {
    50
}
fn default_clip() -> f64 {
    1.0
}
fn default_stride() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Steps per episode; `None` means `N`.
    #[serde(default)]
    pub episode_len: Option<usize>,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_beta")]
    pub baseline_decay: f64,
    /// Greedy objective is logged every this many epochs (and at the last).
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default = "default_clip")]
    pub grad_clip: f64,
    /// Only rates that are multiples of this are rewarded.
    #[serde(default = "default_stride")]
    pub rate_stride: usize,
    /// Fill `wall_ms`; off by default so logs are reproducible.
    #[serde(default)]
    pub record_wall_time: bool,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            episode_len: None,
            gamma: default_gamma(),
            learning_rate: default_lr(),
            batch_size: default_batch(),
            epochs: default_epochs(),
            baseline_decay: default_beta(),
            eval_every: default_eval_every(),
            grad_clip: default_clip(),
            rate_stride: default_stride(),
            record_wall_time: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return bad(format!(
                "learning rate {} must be finite and nonnegative",
                self.learning_rate
            ));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma {} outside [0, 1]", self.gamma));
        }
        if !(self.baseline_decay >= 0.0 && self.baseline_decay < 1.0) {
            return bad(format!(
                "baseline decay {} outside [0, 1)",
                self.baseline_decay
            ));
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.rate_stride == 0 {
            return bad("batch_size, eval_every and rate_stride must be positive".into());
        }
        if self.grad_clip.is_nan() || self.grad_clip <= 0.0 {
            return bad("grad_clip must be positive".into());
        }
        let k = self.episode_len(n);
        if k == 0 || k > n {
            return bad(format!("episode length {k} outside 1..={n}"));
        }
        Ok(())
    }

    pub fn episode_len(&self, n: usize) -> usize {
        self.episode_len.unwrap_or(n)
    }

    /// Weights with off-stride rates zeroed.
    pub fn effective_weights(&self, weights: &RateWeights) -> Result<RateWeights> {
        let w = weights
            .weights
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                if (i + 1) % self.rate_stride == 0 {
                    c
                } else {
                    0.0
                }
            })
            .collect();
        Ok(RateWeights::new(w, weights.snr_db.clone())?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub actions: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub returns: Vec<f64>,
}

impl Trajectory {
    pub fn new(actions: Vec<usize>, log_probs: Vec<f64>, rewards: Vec<f64>, gamma: f64) -> Self {
        let returns = compute_returns(&rewards, gamma);
        Self {
            actions,
            log_probs,
            rewards,
            returns,
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// `G_t = R_t + γ G_{t+1}`, `G_{K+1} = 0`.
pub fn compute_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (g, &r) in out.iter_mut().zip(rewards).rev() {
        acc = r + gamma * acc;
        *g = acc;
    }
    out
}

/// `-(1/B) Σ_e Σ_t log π_t (G_t - b)` from recorded log-probabilities.
pub fn policy_loss(batch: &[Trajectory], baseline: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut total = 0.0;
    for (e, tr) in batch.iter().enumerate() {
        for (t, (&lp, &g)) in tr.log_probs.iter().zip(&tr.returns).enumerate() {
            if !lp.is_finite() {
                return Err(Error::NonFinite(format!(
                    "log-prob at episode {e} step {t}"
                )));
            }
            total += lp * (g - baseline);
        }
    }
    Ok(-total / batch.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineTracker {
    pub value: f64,
    pub decay: f64,
}

impl BaselineTracker {
    pub fn new(value: f64, decay: f64) -> Self {
        Self { value, decay }
    }

    pub fn update(&mut self, mean_return: f64) {
        self.value = self.decay * self.value + (1.0 - self.decay) * mean_return;
    }
}

pub fn update_baseline(mut tracker: BaselineTracker, mean_return: f64) -> BaselineTracker {
    tracker.update(mean_return);
    tracker
}

/// Per-step rewards for a finished action list.
pub fn episode_rewards(
    actions: &[usize],
    weights: &RateWeights,
    engine: &RewardEngine,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(actions.len());
    for k in 1..=actions.len() {
        out.push(engine.reward(&actions[..k], weights)?);
    }
    Ok(out)
}

/// Rewards for a whole batch; simulations for distinct prefixes run in
/// parallel and enter the cache in a fixed order.
pub fn batch_rewards(
    episodes: &[Vec<usize>],
    weights: &RateWeights,
    engine: &RewardEngine,
) -> Result<Vec<Vec<f64>>> {
    let mut requests = Vec::new();
    let mut slots = Vec::new();
    for (e, actions) in episodes.iter().enumerate() {
        for k in 1..=actions.len().min(weights.len()) {
            if weights.weight(k) > 0.0 {
                requests.push((&actions[..k], weights.snr(k)));
                slots.push((e, k));
            }
        }
    }
    let blers = engine.bler_many(&requests)?;
    let mut out: Vec<Vec<f64>> = episodes.iter().map(|a| vec![0.0; a.len()]).collect();
    for ((e, k), est) in slots.into_iter().zip(blers) {
        out[e][k - 1] = -weights.weight(k) * est.bler();
    }
    Ok(out)
}

pub fn run_episode<R: Rng + ?Sized>(
    params: &PolicyParams,
    len: usize,
    gamma: f64,
    weights: &RateWeights,
    engine: &RewardEngine,
    mode: ActionMode,
    rng: &mut R,
) -> Result<Trajectory> {
    if len > weights.len() {
        return Err(Error::InvalidArgument(format!(
            "no weights beyond rate {}",
            weights.len()
        )));
    }
    let (actions, log_probs) = params.rollout(len, mode, rng)?;
    let rewards = episode_rewards(&actions, weights, engine)?;
    Ok(Trajectory::new(actions, log_probs, rewards, gamma))
}

/// Greedy order of all `N` indices.
pub fn greedy_order(params: &PolicyParams) -> Result<Vec<usize>> {
    // Greedy rollouts never touch the RNG.
    let mut rng = frame_rng(0, 0);
    Ok(params
        .rollout(params.config().n, ActionMode::Greedy, &mut rng)?
        .0)
}

/// Greedy rollout packaged as a learned reliability sequence.
pub fn extract_sequence(
    params: &PolicyParams,
    config_digest: &str,
    seed: u64,
    extra: BTreeMap<String, serde_json::Value>,
) -> Result<ReliabilitySequence> {
    let mut info = extra;
    info.insert(
        "policy".into(),
        serde_json::Value::String(params.config().canonical()),
    );
    Ok(ReliabilitySequence::new(
        greedy_order(params)?,
        Provenance::Rl {
            config_digest: config_digest.to_string(),
            seed,
            params: info,
        },
    )?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    /// Mean episode return `G_1` over the batch.
    pub mean_return: f64,
    /// Baseline used for this epoch's advantages.
    pub baseline: f64,
    pub loss: f64,
    pub greedy_objective: Option<f64>,
    pub wall_ms: u64,
}

impl LogRow {
    pub const CSV_HEADER: &'static str = "epoch,mean_return,baseline,loss,greedy_objective,wall_ms";

    pub fn to_csv(&self) -> String {
        let obj = self
            .greedy_objective
            .map(|v| v.to_string())
            .unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.mean_return, self.baseline, self.loss, obj, self.wall_ms
        )
    }
}

pub struct TrainOutcome {
    pub params: PolicyParams,
    /// Greedy order of the final policy.
    pub order: Vec<usize>,
    /// Greedy order of the untrained policy.
    pub initial_order: Vec<usize>,
    pub log: Vec<LogRow>,
}

/// Digest of everything that determines a training run.
pub fn run_digest(
    policy: &PolicyConfig,
    cfg: &TrainConfig,
    engine: &RewardEngine,
    weights: &RateWeights,
) -> String {
    short_digest(&format!(
        "{};seed={};{};dec={};stop={};chan={};engine_seed={};weights={}",
        policy.canonical(),
        policy.seed,
        serde_json::to_string(cfg).expect("serializable config"),
        engine.setup.decoder_digest(),
        engine.stop.digest(),
        engine.setup.channel,
        engine.seed,
        weights.digest()
    ))
}

pub fn train(
    policy: PolicyConfig,
    cfg: &TrainConfig,
    engine: &RewardEngine,
    weights: &RateWeights,
    on_epoch: impl FnMut(&LogRow),
) -> Result<TrainOutcome> {
    train_from(PolicyParams::init(policy)?, cfg, engine, weights, on_epoch)
}

/// Trains starting from `params`. On divergence the error carries the last
/// finite parameters.
pub fn train_from(
    mut params: PolicyParams,
    cfg: &TrainConfig,
    engine: &RewardEngine,
    weights: &RateWeights,
    mut on_epoch: impl FnMut(&LogRow),
) -> Result<TrainOutcome> {
    let n = params.config().n;
    cfg.validate(n)?;
    if engine.setup.n != n {
        return Err(Error::InvalidArgument(format!(
            "policy N={n} but simulator N={}",
            engine.setup.n
        )));
    }
    let len = cfg.episode_len(n);
    if len > weights.len() {
        return Err(Error::InvalidArgument(format!(
            "no weights beyond rate {}",
            weights.len()
        )));
    }
    let weights = cfg.effective_weights(weights)?;
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.learning_rate), params.data().len());
    let mut baseline: Option<BaselineTracker> = None;
    let initial_order = greedy_order(&params)?;
    let mut log = Vec::with_capacity(cfg.epochs);
    let rollout_seed = derive_seed(cfg.seed, "rollout");
    let started = Instant::now();

    for epoch in 0..cfg.epochs {
        let mut episodes = Vec::with_capacity(cfg.batch_size);
        for e in 0..cfg.batch_size {
            let mut rng = frame_rng(rollout_seed, (epoch * cfg.batch_size + e) as u64);
            episodes.push(params.rollout(len, ActionMode::Sample, &mut rng)?);
        }
        let actions: Vec<Vec<usize>> = episodes.iter().map(|(a, _)| a.clone()).collect();
        let rewards = batch_rewards(&actions, &weights, engine)?;
        let batch: Vec<Trajectory> = episodes
            .into_iter()
            .zip(rewards)
            .map(|((a, lp), r)| Trajectory::new(a, lp, r, cfg.gamma))
            .collect();

        let steps = (batch.len() * len) as f64;
        let mean_step_return = batch.iter().flat_map(|t| &t.returns).sum::<f64>() / steps;
        let mean_return = batch.iter().map(|t| t.returns[0]).sum::<f64>() / batch.len() as f64;
        let tracker =
            baseline.get_or_insert(BaselineTracker::new(mean_step_return, cfg.baseline_decay));
        let b = tracker.value;

        let advantages: Vec<Vec<f64>> = batch
            .iter()
            .map(|t| t.returns.iter().map(|g| g - b).collect())
            .collect();
        let weighted: Vec<WeightedEpisode> = batch
            .iter()
            .zip(&advantages)
            .map(|(t, a)| WeightedEpisode {
                actions: &t.actions,
                weights: a,
            })
            .collect();
        let (loss, mut grad) = params.backward(&weighted)?;
        grad.clip_norm(cfg.grad_clip);
        let last_good = params.clone();
        adam.step(params.data_mut(), &grad.data);
        if let Some(name) = params.first_non_finite() {
            log::error!("epoch {epoch}: non-finite parameter in {name}");
            return Err(Error::Diverged {
                epoch,
                last_good: Box::new(last_good),
            });
        }
        tracker.update(mean_step_return);

        let greedy_objective = if (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs {
            Some(engine.objective(&greedy_order(&params)?[..len], &weights)?)
        } else {
            None
        };
        let row = LogRow {
            epoch,
            mean_return,
            baseline: b,
            loss,
            greedy_objective,
            wall_ms: if cfg.record_wall_time {
                started.elapsed().as_millis() as u64
            } else {
                0
            },
        };
        if let Some(obj) = greedy_objective {
            log::info!("epoch {epoch}: mean return {mean_return:.5}, greedy objective {obj:.5}");
        }
        on_epoch(&row);
        log.push(row);
    }

    let order = greedy_order(&params)?;
    Ok(TrainOutcome {
        params,
        order,
        initial_order,
        log,
    })
}
