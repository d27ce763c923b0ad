//! Construction schemes named on the command line.
//!
//! `nr`, `dega`, `dega@<dB>`, `mc`, `mc@<dB>`, `<label>=<file.json>` or a
//! bare `*.json` path (labelled by its file stem). Unpinned `dega` and `mc`
//! are designed at the SNR and rate being evaluated.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{anyhow, bail, Result};
use polarseq_core::channel::ChannelKind;
use polarseq_core::construction::{dega_sequence, mc_sequence, nr_sequence, ReliabilitySequence};

pub const MC_TRIALS: u64 = 100_000;

#[derive(Debug, Clone, PartialEq)]
pub enum Scheme {
    Nr,
    Dega { design_db: Option<f64> },
    Mc { design_db: Option<f64> },
    File { label: String, path: PathBuf },
}

impl FromStr for Scheme {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        let pinned = |rest: &str| -> Result<Option<f64>> {
            match rest.strip_prefix('@') {
                None if rest.is_empty() => Ok(None),
                Some(db) => Ok(Some(
                    db.parse().map_err(|_| anyhow!("bad design SNR in {s:?}"))?,
                )),
                None => bail!("unknown scheme {s:?}"),
            }
        };
        if let Some((label, path)) = s.split_once('=') {
            if label.is_empty() || path.is_empty() {
                bail!("expected <label>=<path>, got {s:?}");
            }
            return Ok(Scheme::File {
                label: label.to_string(),
                path: path.into(),
            });
        }
        if s == "nr" {
            return Ok(Scheme::Nr);
        }
        if let Some(rest) = s.strip_prefix("dega") {
            return Ok(Scheme::Dega {
                design_db: pinned(rest)?,
            });
        }
        if let Some(rest) = s.strip_prefix("mc") {
            return Ok(Scheme::Mc {
                design_db: pinned(rest)?,
            });
        }
        if s.ends_with(".json") {
            let path = PathBuf::from(s);
            let label = path
                .file_stem()
                .and_then(|x| x.to_str())
                .ok_or_else(|| anyhow!("cannot label {s:?}"))?
                .to_string();
            return Ok(Scheme::File { label, path });
        }
        bail!("unknown scheme {s:?} (expected nr, dega[@dB], mc[@dB], label=path or *.json)")
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scheme::Nr => f.write_str("nr"),
            Scheme::Dega { design_db: None } => f.write_str("dega"),
            Scheme::Dega { design_db: Some(d) } => write!(f, "dega@{d}"),
            Scheme::Mc { design_db: None } => f.write_str("mc"),
            Scheme::Mc { design_db: Some(d) } => write!(f, "mc@{d}"),
            Scheme::File { label, .. } => f.write_str(label),
        }
    }
}

impl Scheme {
    /// Whether the sequence depends on the evaluation point.
    pub fn is_adaptive(&self) -> bool {
        matches!(
            self,
            Scheme::Dega { design_db: None } | Scheme::Mc { design_db: None }
        )
    }

    /// The sequence for length `n`. `design` is the `(snr_db, rate)` being
    /// evaluated, used by unpinned designs.
    pub fn sequence(
        &self,
        n: usize,
        design: Option<(f64, f64)>,
        channel: ChannelKind,
        seed: u64,
    ) -> Result<ReliabilitySequence> {
        let point = |pinned: Option<f64>| -> Result<(f64, f64)> {
            match (pinned, design) {
                (Some(db), Some((_, rate))) => Ok((db, rate)),
                (Some(db), None) => Ok((db, 0.5)),
                (None, Some(p)) => Ok(p),
                (None, None) => bail!("scheme {self} needs a design SNR here (use {self}@<dB>)"),
            }
        };
        let seq = match self {
            Scheme::Nr => nr_sequence(n)?,
            Scheme::Dega { design_db } => {
                let (db, rate) = point(*design_db)?;
                dega_sequence(n, db, rate)?
            }
            Scheme::Mc { design_db } => {
                let (db, rate) = point(*design_db)?;
                mc_sequence(n, channel, db, rate, MC_TRIALS, seed)?
            }
            Scheme::File { path, .. } => ReliabilitySequence::load(path)
                .map_err(|e| anyhow!("loading {}: {e}", path.display()))?,
        };
        if seq.n != n {
            bail!("scheme {self} has N={}, expected {n}", seq.n);
        }
        Ok(seq)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_forms() {
        assert_eq!("nr".parse::<Scheme>().unwrap(), Scheme::Nr);
        assert_eq!(
            "dega".parse::<Scheme>().unwrap(),
            Scheme::Dega { design_db: None }
        );
        assert_eq!(
            "mc@1.5".parse::<Scheme>().unwrap(),
            Scheme::Mc {
                design_db: Some(1.5)
            }
        );
        assert_eq!(
            "rl=out/seq.json".parse::<Scheme>().unwrap(),
            Scheme::File {
                label: "rl".into(),
                path: "out/seq.json".into()
            }
        );
        assert_eq!(
            "runs/learned.json".parse::<Scheme>().unwrap(),
            Scheme::File {
                label: "learned".into(),
                path: "runs/learned.json".into()
            }
        );
        for bad in ["dega2", "mc@x", "=a.json", "fancy"] {
            assert!(bad.parse::<Scheme>().is_err(), "{bad}");
        }
        assert_eq!("dega@2".parse::<Scheme>().unwrap().to_string(), "dega@2");
    }

    #[test]
    fn unpinned_design_needs_a_point() {
        let s = Scheme::Dega { design_db: None };
        assert!(s.sequence(16, None, ChannelKind::Awgn, 0).is_err());
        assert_eq!(
            s.sequence(16, Some((2.0, 0.5)), ChannelKind::Awgn, 0)
                .unwrap()
                .n,
            16
        );
    }
}
