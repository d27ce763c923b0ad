//! Training runs, the PE ablation, and learned-sequence extraction.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use anyhow::{Context, Result};
use polarseq_core::construction::ReliabilitySequence;
use polarseq_core::reward::{RateWeights, RewardCache};
use polarseq_policy::checkpoint;
use polarseq_policy::trainer::{extract_sequence, train, LogRow, TrainOutcome};
use polarseq_policy::{Error as PolicyError, PolicyParams};
use serde_json::Value;

use crate::commands::sweep::CALIBRATION_COLUMNS;
use crate::experiment::ExperimentConfig;
use crate::output::{header, write_file, CsvAppender};

pub const LOG_FILE: &str = "train_log.csv";
pub const CHECKPOINT_FILE: &str = "policy.ckpt";
pub const SEQUENCE_FILE: &str = "sequence.json";
pub const INITIAL_SEQUENCE_FILE: &str = "initial_sequence.json";
pub const CALIBRATION_FILE: &str = "calibration.csv";

pub struct TrainingRun {
    pub weights: RateWeights,
    pub outcome: TrainOutcome,
    pub sequence: ReliabilitySequence,
    pub initial_sequence: ReliabilitySequence,
}

pub fn open_cache(path: Option<&Path>) -> Result<Arc<RewardCache>> {
    Ok(Arc::new(match path {
        Some(p) => {
            let cache =
                RewardCache::open(p).with_context(|| format!("opening cache {}", p.display()))?;
            log::info!("reward cache {}: {} entries", p.display(), cache.len());
            cache
        }
        None => RewardCache::in_memory(),
    }))
}

fn provenance_params(cfg: &ExperimentConfig, stage: &str) -> BTreeMap<String, Value> {
    let mut m = BTreeMap::new();
    m.insert("stage".into(), Value::from(stage));
    m.insert("epochs".into(), Value::from(cfg.train.epochs));
    m.insert(
        "decoder".into(),
        Value::from(
            cfg.setup()
                .map(|s| s.decoder.canonical())
                .unwrap_or_default(),
        ),
    );
    m.insert("channel".into(), Value::from(cfg.code.channel.id()));
    m
}

pub fn learned_sequence(
    cfg: &ExperimentConfig,
    params: &PolicyParams,
    stage: &str,
) -> Result<ReliabilitySequence> {
    let digest = cfg.digest();
    Ok(extract_sequence(
        params,
        &digest,
        cfg.train.seed,
        provenance_params(cfg, stage),
    )?
    .with_header(header(digest, cfg.train.seed)))
}

fn write_calibration(cfg: &ExperimentConfig, snrs: &[f64], path: &Path) -> Result<()> {
    let _ = std::fs::remove_file(path);
    let mut csv = CsvAppender::open(
        path,
        &header(cfg.digest(), cfg.reward.seed),
        &[&format!(
            "reference={} target_bler={}",
            cfg.reward.reference, cfg.reward.target_bler
        )],
        CALIBRATION_COLUMNS,
    )?;
    for k in cfg.rewarded_rates() {
        csv.row(&format!("{k},{:.3},ok", snrs[k - 1]))?;
    }
    Ok(())
}

/// Calibrates (unless pinned), trains and, when `out_dir` is given, writes
/// the calibration table, training log, checkpoint and sequences there.
pub fn run_training(
    cfg: &ExperimentConfig,
    cache: Arc<RewardCache>,
    snrs: Option<Vec<f64>>,
    out_dir: Option<&Path>,
) -> Result<TrainingRun> {
    cfg.validate()?;
    let snrs = match snrs {
        Some(s) => s,
        None => cfg.rate_snrs()?,
    };
    let weights = cfg.weights(snrs.clone())?;
    let engine = cfg.engine(Some(cache))?;
    let mut log_csv = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            write_calibration(cfg, &snrs, &dir.join(CALIBRATION_FILE))?;
            let path = dir.join(LOG_FILE);
            let _ = std::fs::remove_file(&path);
            Some(CsvAppender::open(
                &path,
                &header(cfg.digest(), cfg.train.seed),
                &[],
                LogRow::CSV_HEADER,
            )?)
        }
        None => None,
    };
    let mut sink_err = None;
    let result = train(cfg.policy_config(), &cfg.train, &engine, &weights, |row| {
        if let Some(csv) = log_csv.as_mut() {
            if let Err(e) = csv.row(&row.to_csv()) {
                sink_err.get_or_insert(e);
            }
        }
    });
    if let Some(e) = sink_err {
        return Err(e);
    }
    let outcome = match result {
        Ok(o) => o,
        Err(PolicyError::Diverged { epoch, last_good }) => {
            if let Some(dir) = out_dir {
                checkpoint::save(&last_good, &dir.join(CHECKPOINT_FILE))?;
            }
            anyhow::bail!("training diverged at epoch {epoch}; last finite parameters saved");
        }
        Err(e) => return Err(e.into()),
    };
    let sequence = learned_sequence(cfg, &outcome.params, "final")?;
    let initial = PolicyParams::init(cfg.policy_config())?;
    let initial_sequence = learned_sequence(cfg, &initial, "initial")?;
    if let Some(dir) = out_dir {
        checkpoint::save(&outcome.params, &dir.join(CHECKPOINT_FILE))?;
        write_file(&dir.join(SEQUENCE_FILE), &(sequence.to_json() + "\n"))?;
        write_file(
            &dir.join(INITIAL_SEQUENCE_FILE),
            &(initial_sequence.to_json() + "\n"),
        )?;
    }
    Ok(TrainingRun {
        weights,
        outcome,
        sequence,
        initial_sequence,
    })
}

/// The same recipe with positional encoding on and off, sharing seeds,
/// per-rate SNRs and the reward cache. Writes `pe_on/`, `pe_off/` and a
/// summary under `out_dir`.
pub fn ablate_pe(
    cfg: &ExperimentConfig,
    cache: Arc<RewardCache>,
    out_dir: &Path,
) -> Result<Vec<(String, TrainingRun)>> {
    let snrs = cfg.rate_snrs()?;
    let mut runs = Vec::new();
    for (name, pe) in [("pe_on", true), ("pe_off", false)] {
        let mut variant = cfg.clone();
        variant.policy.use_positional_encoding = pe;
        log::info!("ablation variant {name} ({})", variant.digest());
        let run = run_training(
            &variant,
            cache.clone(),
            Some(snrs.clone()),
            Some(&out_dir.join(name)),
        )?;
        runs.push((name.to_string(), run));
    }
    let path = out_dir.join("summary.csv");
    let _ = std::fs::remove_file(&path);
    let mut csv = CsvAppender::open(
        &path,
        &header(cfg.digest(), cfg.train.seed),
        &[],
        "variant,config_digest,final_greedy_objective",
    )?;
    for (name, run) in &runs {
        let mut variant = cfg.clone();
        variant.policy.use_positional_encoding = name == "pe_on";
        let obj = run
            .outcome
            .log
            .last()
            .and_then(|r| r.greedy_objective)
            .map(|v| v.to_string())
            .unwrap_or_default();
        csv.row(&format!("{name},{},{obj}", variant.digest()))?;
    }
    Ok(runs)
}
