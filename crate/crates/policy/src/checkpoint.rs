//! Binary checkpoints.
//!
//! One ASCII header line
//! `polarseq-checkpoint v1 <digest> <N> <d> <layers> <heads> <ff> <pe> <count>`
//! followed by `count` little-endian `f64` values in layout order. The
//! digest is the architecture digest of the header fields and is checked on
//! load.

use std::io::Write;
use std::path::Path;

use crate::net::{PolicyConfig, PolicyParams};
use crate::{Error, Result};

pub const MAGIC: &str = "polarseq-checkpoint";
pub const VERSION: &str = "v1";

pub fn to_bytes(params: &PolicyParams) -> Vec<u8> {
    let c = params.config();
    let header = format!(
        "{MAGIC} {VERSION} {} {} {} {} {} {} {} {}\n",
        c.digest(),
        c.n,
        c.d,
        c.layers,
        c.heads,
        c.ff_hidden,
        c.use_positional_encoding as u8,
        params.data().len()
    );
    let mut out = header.into_bytes();
    for v in params.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<PolicyParams> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing header"))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| bad("header is not text"))?;
    let f: Vec<&str> = header.split(' ').collect();
    if f.len() != 10 || f[0] != MAGIC {
        return Err(bad("malformed header"));
    }
    if f[1] != VERSION {
        return Err(bad(&format!("unsupported version {}", f[1])));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| bad("malformed header field"))
    };
    let pe = match f[8] {
        "0" => false,
        "1" => true,
        _ => return Err(bad("malformed PE flag")),
    };
    let cfg = PolicyConfig {
        n: num(f[3])?,
        d: num(f[4])?,
        layers: num(f[5])?,
        heads: num(f[6])?,
        ff_hidden: num(f[7])?,
        use_positional_encoding: pe,
        seed: 0,
    };
    cfg.validate()?;
    if cfg.digest() != f[2] {
        return Err(bad("config digest mismatch"));
    }
    let count = num(f[9])?;
    let body = &bytes[nl + 1..];
    if body.len() != count * 8 {
        return Err(bad(&format!(
            "expected {} payload bytes, found {}",
            count * 8,
            body.len()
        )));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    PolicyParams::from_data(cfg, data)
}

pub fn save(params: &PolicyParams, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&to_bytes(params))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<PolicyParams> {
    from_bytes(&std::fs::read(path)?)
}
