//! Persistent reward lookup table.
//!
//! Records are appended one per line:
//! `v1 <bitmask-hex> <channel-id> <snr-millidb> <dec-digest> <stop-digest> <errors> <frames>`.
//! Lines that fail to parse are skipped on load. The first value stored for
//! a key is kept; later puts return it unchanged.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use super::{BlerEstimate, RewardKey};
use crate::channel::ChannelKind;
use crate::Result;

pub const CACHE_HEADER: &str = "#polarseq-reward-cache v1";

pub struct RewardCache {
    map: RwLock<HashMap<RewardKey, BlerEstimate>>,
    file: Option<Mutex<BufWriter<File>>>,
    path: Option<PathBuf>,
    skipped: usize,
}

fn parse_record(line: &str) -> Option<(RewardKey, BlerEstimate)> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 8 || fields[0] != "v1" {
        return None;
    }
    if !fields[1].chars().all(|c| c.is_ascii_hexdigit()) {
        return None;
    }
    let channel: ChannelKind = fields[2].parse().ok()?;
    let snr_millidb = fields[3].parse().ok()?;
    let errors: u64 = fields[6].parse().ok()?;
    let frames: u64 = fields[7].parse().ok()?;
    if frames == 0 || errors > frames {
        return None;
    }
    Some((
        RewardKey {
            mask: fields[1].to_string(),
            channel,
            snr_millidb,
            decoder_digest: fields[4].to_string(),
            stop_digest: fields[5].to_string(),
        },
        BlerEstimate { errors, frames },
    ))
}

fn format_record(key: &RewardKey, est: &BlerEstimate) -> String {
    format!("v1 {key} {} {}", est.errors, est.frames)
}

impl RewardCache {
    pub fn in_memory() -> Self {
        Self {
            map: RwLock::new(HashMap::new()),
            file: None,
            path: None,
            skipped: 0,
        }
    }

    /// Loads `path` if it exists and appends new records to it.
    pub fn open(path: &Path) -> Result<Self> {
        let mut map = HashMap::new();
        let mut skipped = 0;
        let exists = path.exists();
        if exists {
            for (lineno, line) in BufReader::new(File::open(path)?).lines().enumerate() {
                let line = match line {
                    Ok(l) => l,
                    Err(_) => {
                        skipped += 1;
                        continue;
                    }
                };
                if line.starts_with('#') || line.trim().is_empty() {
                    continue;
                }
                match parse_record(&line) {
                    Some((k, v)) => {
                        map.entry(k).or_insert(v);
                    }
                    None => {
                        log::warn!(
                            "{}:{}: skipping corrupt cache record",
                            path.display(),
                            lineno + 1
                        );
                        skipped += 1;
                    }
                }
            }
        }
        let mut file = OpenOptions::new().create(true).append(true).open(path)?;
        if !exists || std::fs::metadata(path)?.len() == 0 {
            writeln!(file, "{CACHE_HEADER}")?;
        } else {
            // A torn last line must not swallow the next record.
            let text = std::fs::read(path)?;
            if text.last() != Some(&b'\n') {
                writeln!(file)?;
            }
        }
        Ok(Self {
            map: RwLock::new(map),
            file: Some(Mutex::new(BufWriter::new(file))),
            path: Some(path.to_path_buf()),
            skipped,
        })
    }

    pub fn get(&self, key: &RewardKey) -> Option<BlerEstimate> {
        self.map.read().expect("cache lock").get(key).copied()
    }

    /// Stores `est` unless the key is already present; returns the stored value.
    pub fn put(&self, key: RewardKey, est: BlerEstimate) -> Result<BlerEstimate> {
        let mut map = self.map.write().expect("cache lock");
        if let Some(existing) = map.get(&key) {
            return Ok(*existing);
        }
        if let Some(file) = &self.file {
            let mut w = file.lock().expect("cache file lock");
            writeln!(w, "{}", format_record(&key, &est))?;
            w.flush()?;
        }
        map.insert(key, est);
        Ok(est)
    }

    pub fn len(&self) -> usize {
        self.map.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Corrupt lines seen while loading.
    pub fn skipped(&self) -> usize {
        self.skipped
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    /// Rewrites `path` with one sorted record per key.
    pub fn compact(path: &Path) -> Result<usize> {
        let cache = Self::open(path)?;
        let map = cache.map.read().expect("cache lock");
        let mut lines: Vec<String> = map.iter().map(|(k, v)| format_record(k, v)).collect();
        lines.sort();
        let tmp = path.with_extension("compact.tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            writeln!(w, "{CACHE_HEADER}")?;
            for l in &lines {
                writeln!(w, "{l}")?;
            }
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(lines.len())
    }
}
