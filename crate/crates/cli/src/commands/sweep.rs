//! BLER sweeps, SNR-at-target searches and per-rate calibration tables.

use std::collections::HashSet;
use std::path::Path;

use anyhow::Result;
use polarseq_core::channel::{ChannelKind, SnrAxis};
use polarseq_core::code::{CrcConfig, KConvention};
use polarseq_core::construction::{nr_sequence, ReliabilitySequence};
use polarseq_core::decoder::Metric;
use polarseq_core::digest::derive_seed;
use polarseq_core::reward::{
    calibrate_training_snr, estimate_bler, snr_to_millidb, CalibrationConfig, SimSetup, StopRule,
};
use polarseq_core::Error as CoreError;

use crate::experiment::decoder_for;
use crate::output::{args_digest, header, CsvAppender};
use crate::scheme::Scheme;

pub const SWEEP_COLUMNS: &str = "scheme,channel,N,K,L,snr_db,frames,errors,bler";
pub const FIND_SNR_COLUMNS: &str = "scheme,K,snr_db,relative_snr_db,status";
pub const CALIBRATION_COLUMNS: &str = "K,snr_db,status";

/// Code length, channel and decoder shared by the sweep commands.
#[derive(Debug, Clone)]
pub struct Link {
    pub n: usize,
    pub channel: ChannelKind,
    pub list_size: usize,
    pub crc: CrcConfig,
    pub k_convention: KConvention,
}

impl Link {
    pub fn setup(&self) -> SimSetup {
        SimSetup {
            n: self.n,
            crc: self.crc,
            channel: self.channel,
            axis: SnrAxis::EbN0,
            decoder: decoder_for(self.list_size, &self.crc, Metric::Exact),
        }
    }

    /// Non-frozen positions for a user-facing `k`.
    pub fn info_len(&self, k: usize) -> usize {
        self.k_convention.info_size(k, &self.crc)
    }

    fn canonical(&self) -> String {
        let mut text = format!(
            "N={};channel={};L={};crc={}",
            self.n,
            self.channel,
            self.list_size,
            self.crc.label()
        );
        if self.k_convention == KConvention::ExcludesCrc {
            text.push_str(";k=payload");
        }
        text
    }
}

fn fmt_db(db: f64) -> String {
    format!("{:.3}", snr_to_millidb(db) as f64 / 1000.0)
}

#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub schemes: Vec<Scheme>,
    pub link: Link,
    pub ks: Vec<usize>,
    pub grid: Vec<f64>,
    pub stop: StopRule,
    pub seed: u64,
}

impl SweepSpec {
    fn digest(&self) -> String {
        let schemes: Vec<String> = self.schemes.iter().map(|s| s.to_string()).collect();
        let grid: Vec<String> = self
            .grid
            .iter()
            .map(|g| snr_to_millidb(*g).to_string())
            .collect();
        args_digest(&format!(
            "evaluate;{};schemes={};K={:?};grid={};stop={}",
            self.link.canonical(),
            schemes.join(","),
            self.ks,
            grid.join(","),
            self.stop.digest()
        ))
    }
}

/// Noise seed of one grid point. Schemes share it, so comparisons between
/// schemes at a point use the same channel realizations.
pub fn point_seed(seed: u64, link: &Link, k: usize, snr_db: f64) -> u64 {
    derive_seed(
        seed,
        &format!(
            "evaluate/{}/{}/{}/{}",
            link.channel,
            link.n,
            k,
            snr_to_millidb(snr_db)
        ),
    )
}

/// Appends every missing `(scheme, K, SNR)` row to `out`; returns how many
/// rows were simulated.
pub fn evaluate(spec: &SweepSpec, out: &Path) -> Result<usize> {
    anyhow::ensure!(!spec.grid.is_empty(), "empty SNR grid");
    anyhow::ensure!(!spec.schemes.is_empty(), "no schemes given");
    let done: HashSet<(String, String, String, String, String, i64)> =
        crate::output::read_records(out)?
            .iter()
            .filter(|r| r.len() >= 6)
            .filter_map(|r| {
                let db: f64 = r[5].parse().ok()?;
                Some((
                    r[0].into(),
                    r[1].into(),
                    r[2].into(),
                    r[3].into(),
                    r[4].into(),
                    snr_to_millidb(db),
                ))
            })
            .collect();
    let stamp = header(spec.digest(), spec.seed);
    let mut csv = CsvAppender::open(out, &stamp, &[], SWEEP_COLUMNS)?;
    let setup = spec.link.setup();
    let n = spec.link.n;
    let mut written = 0;
    for scheme in &spec.schemes {
        let fixed = if scheme.is_adaptive() {
            None
        } else {
            Some(scheme.sequence(n, None, spec.link.channel, spec.seed)?)
        };
        for &k in &spec.ks {
            for &snr in &spec.grid {
                let key = (
                    scheme.to_string(),
                    spec.link.channel.to_string(),
                    n.to_string(),
                    k.to_string(),
                    spec.link.list_size.to_string(),
                    snr_to_millidb(snr),
                );
                if done.contains(&key) {
                    continue;
                }
                let m = spec.link.info_len(k);
                let seq = match &fixed {
                    Some(s) => s.clone(),
                    None => scheme.sequence(
                        n,
                        Some((snr, m as f64 / n as f64)),
                        spec.link.channel,
                        spec.seed,
                    )?,
                };
                let est = estimate_bler(
                    seq.info_set(m)?,
                    &setup,
                    snr,
                    &spec.stop,
                    point_seed(spec.seed, &spec.link, k, snr),
                )?;
                log::info!(
                    "{scheme} K={k} {snr:.3} dB: {}/{} errors",
                    est.errors,
                    est.frames
                );
                csv.row(&format!(
                    "{},{},{},{},{},{},{},{},{}",
                    key.0,
                    key.1,
                    key.2,
                    key.3,
                    key.4,
                    fmt_db(snr),
                    est.frames,
                    est.errors,
                    est.bler()
                ))?;
                written += 1;
            }
        }
    }
    Ok(written)
}

#[derive(Debug, Clone)]
pub struct FindSnrSpec {
    pub schemes: Vec<Scheme>,
    pub link: Link,
    pub ks: Vec<usize>,
    pub calibration: CalibrationConfig,
}

fn outcome(r: &polarseq_core::Result<f64>) -> (String, &'static str) {
    match r {
        Ok(db) => (fmt_db(*db), "ok"),
        Err(CoreError::Bracket { .. }) => (String::new(), "bracket"),
        Err(CoreError::NoConvergence { .. }) => (String::new(), "no-convergence"),
        Err(_) => (String::new(), "error"),
    }
}

fn calibrate_scheme(
    scheme: &Scheme,
    k: usize,
    link: &Link,
    cal: &CalibrationConfig,
    design_db: Option<f64>,
) -> Result<polarseq_core::Result<f64>> {
    let k = link.info_len(k);
    let seq: ReliabilitySequence = match (scheme.is_adaptive(), design_db) {
        (true, Some(db)) => scheme.sequence(
            link.n,
            Some((db, k as f64 / link.n as f64)),
            link.channel,
            cal.seed,
        )?,
        (true, None) => return Ok(Err(CoreError::InvalidArgument("no design point".into()))),
        (false, _) => scheme.sequence(link.n, None, link.channel, cal.seed)?,
    };
    Ok(calibrate_training_snr(&seq, k, &link.setup(), cal))
}

/// SNR each scheme needs at the target BLER, and its offset from NR.
/// Unpinned designs are built at NR's SNR for the same K. A failed search
/// is written as a flagged row.
pub fn find_snr(spec: &FindSnrSpec, out: &Path) -> Result<()> {
    let schemes: Vec<String> = spec.schemes.iter().map(|s| s.to_string()).collect();
    let digest = args_digest(&format!(
        "find-snr;{};schemes={};K={:?};cal={}",
        spec.link.canonical(),
        schemes.join(","),
        spec.ks,
        serde_json::to_string(&spec.calibration)?
    ));
    let stamp = header(digest, spec.calibration.seed);
    let _ = std::fs::remove_file(out);
    let mut csv = CsvAppender::open(
        out,
        &stamp,
        &["relative_snr_db = snr_db - snr_db(nr) at the same K; lower is better"],
        FIND_SNR_COLUMNS,
    )?;
    let nr = nr_sequence(spec.link.n)?;
    for &k in &spec.ks {
        let nr_db = calibrate_training_snr(
            &nr,
            spec.link.info_len(k),
            &spec.link.setup(),
            &spec.calibration,
        );
        let nr_ok = nr_db.as_ref().ok().copied();
        for scheme in &spec.schemes {
            let (db, status, value) = if *scheme == Scheme::Nr {
                let (db, status) = outcome(&nr_db);
                (db, status, nr_ok)
            } else {
                let res = calibrate_scheme(scheme, k, &spec.link, &spec.calibration, nr_ok)?;
                let (db, status) = outcome(&res);
                (db, status, res.ok())
            };
            let rel = match (value, nr_ok) {
                (Some(a), Some(b)) => fmt_db(a - b),
                _ => String::new(),
            };
            log::info!("{scheme} K={k}: {status} {db}");
            csv.row(&format!("{scheme},{k},{db},{rel},{status}"))?;
        }
    }
    Ok(())
}

/// Per-rate SNR table of one scheme.
pub fn calibrate_table(
    scheme: &Scheme,
    link: &Link,
    ks: &[usize],
    cal: &CalibrationConfig,
    out: &Path,
) -> Result<()> {
    let digest = args_digest(&format!(
        "calibrate;{};scheme={scheme};K={ks:?};cal={}",
        link.canonical(),
        serde_json::to_string(cal)?
    ));
    let _ = std::fs::remove_file(out);
    let mut csv = CsvAppender::open(out, &header(digest, cal.seed), &[], CALIBRATION_COLUMNS)?;
    for &k in ks {
        let res = calibrate_scheme(scheme, k, link, cal, None)?;
        let (db, status) = outcome(&res);
        log::info!("K={k}: {status} {db}");
        csv.row(&format!("{k},{db},{status}"))?;
    }
    Ok(())
}
