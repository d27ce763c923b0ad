//! Artifact stamping and small file helpers.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use anyhow::{Context, Result};
use polarseq_core::construction::ArtifactHeader;
use polarseq_core::digest::short_digest;

pub const TOOL: &str = concat!("polarseq ", env!("CARGO_PKG_VERSION"));

pub fn header(config_digest: impl Into<String>, seed: u64) -> ArtifactHeader {
    ArtifactHeader {
        tool: TOOL.to_string(),
        config_digest: config_digest.into(),
        seed,
    }
}

/// Digest of a command's canonical argument description.
pub fn args_digest(canonical: &str) -> String {
    short_digest(canonical)
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Writes to `path`, or stdout when absent.
pub fn emit(path: Option<&Path>, contents: &str) -> Result<()> {
    match path {
        Some(p) => write_file(p, contents),
        None => {
            std::io::stdout().write_all(contents.as_bytes())?;
            Ok(())
        }
    }
}

/// A CSV file opened for appending rows, created with a header if new.
pub struct CsvAppender {
    file: File,
}

impl CsvAppender {
    /// Opens `path`; a new file gets the stamp line, any extra comment
    /// lines, and the column line.
    pub fn open(
        path: &Path,
        stamp: &ArtifactHeader,
        comments: &[&str],
        columns: &str,
    ) -> Result<Self> {
        let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .with_context(|| format!("opening {}", path.display()))?;
        if fresh {
            writeln!(file, "{}", stamp.comment_line())?;
            for c in comments {
                writeln!(file, "# {c}")?;
            }
            writeln!(file, "{columns}")?;
        } else {
            let existing = read_stamp(path)?;
            if existing.as_deref() != Some(stamp.comment_line().as_str()) {
                log::warn!(
                    "{}: resuming a file written under a different configuration",
                    path.display()
                );
            }
        }
        Ok(Self { file })
    }

    pub fn row(&mut self, line: &str) -> Result<()> {
        writeln!(self.file, "{line}")?;
        self.file.flush()?;
        Ok(())
    }
}

fn read_stamp(path: &Path) -> Result<Option<String>> {
    let mut first = String::new();
    BufReader::new(File::open(path)?).read_line(&mut first)?;
    Ok(Some(first.trim_end().to_string()).filter(|l| l.starts_with('#')))
}

/// Data records of a CSV written by [`CsvAppender`].
pub fn read_records(path: &Path) -> Result<Vec<csv::StringRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .flexible(true)
        .from_path(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for rec in reader.records() {
        match rec {
            Ok(r) => out.push(r),
            Err(e) => log::warn!("{}: skipping unreadable row: {e}", path.display()),
        }
    }
    Ok(out)
}

/// `"1,2,8"` or `"1-16"` or a mix.
pub fn parse_k_list(text: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (usize, usize) = (a.trim().parse()?, b.trim().parse()?);
                anyhow::ensure!(a <= b, "empty range {part}");
                out.extend(a..=b);
            }
            None => out.push(part.parse()?),
        }
    }
    anyhow::ensure!(!out.is_empty(), "no K values given");
    Ok(out)
}

/// `"start:step:stop"`, inclusive of `stop`; points are rounded to milli-dB.
pub fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let parts: Vec<f64> = text
        .split(':')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("bad grid {text:?}"))?;
    anyhow::ensure!(parts.len() == 3, "grid must be start:step:stop");
    let (start, step, stop) = (parts[0], parts[1], parts[2]);
    anyhow::ensure!(step > 0.0 && stop >= start, "grid must increase");
    let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
    Ok((0..count)
        .map(|i| ((start + i as f64 * step) * 1000.0).round() / 1000.0)
        .collect())
}
