//! Binary parameter snapshots with a JSON sidecar.
//!
//! Layout of the `.bin` file, all little-endian:
//!
//! ```text
//! u64 D | u64 L | u64 M | u64 p | u64 kind tag | u64 iteration
//! f64 params[L][M][p]
//! ```
//!
//! Kind tags: 0 = mlp, 1 = matrix_pre, 2 = matrix_post, 3 = attention. The
//! activation, token count and key dimension live in the sidecar's config.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::net::NetParams;
use crate::error::{Error, Result};

const HEADER_WORDS: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotSidecar {
    pub config: TrainConfig,
    pub iteration: usize,
    #[serde(default)]
    pub reference: bool,
}

pub fn encode_snapshot(net: &NetParams, iteration: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 * (HEADER_WORDS + net.params().len()));
    for word in [
        net.dim() as u64,
        net.depth() as u64,
        net.width() as u64,
        net.unit_len() as u64,
        net.kind().tag(),
        iteration as u64,
    ] {
        out.extend_from_slice(&word.to_le_bytes());
    }
    for v in net.params() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes a snapshot; `config` supplies what the header does not carry.
pub fn decode_snapshot(bytes: &[u8], config: &TrainConfig) -> Result<(NetParams, usize)> {
    if bytes.len() < 8 * HEADER_WORDS || !bytes.len().is_multiple_of(8) {
        return Err(Error::Invalid("truncated snapshot".into()));
    }
    let word = |i: usize| u64::from_le_bytes(bytes[8 * i..8 * i + 8].try_into().unwrap());
    let (d, l, m, p, tag, iteration) = (
        word(0) as usize,
        word(1) as usize,
        word(2) as usize,
        word(3) as usize,
        word(4),
        word(5) as usize,
    );
    let kind = config.kind();
    if kind.tag() != tag || d != config.dim || kind.param_len(d) != p {
        return Err(Error::Invalid(format!(
            "snapshot header (D={d}, p={p}, kind={tag}) disagrees with its config"
        )));
    }
    let params: Vec<f64> = bytes[8 * HEADER_WORDS..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let net = NetParams::from_parts(kind, d, config.tokens, l, m, params, config.seed)?;
    Ok((net, iteration))
}

fn sidecar_path(bin: &Path) -> PathBuf {
    bin.with_extension("json")
}

/// Writes `<path>` (binary) and `<path minus extension>.json` (sidecar).
pub fn write_snapshot(path: &Path, net: &NetParams, sidecar: &SnapshotSidecar) -> Result<()> {
    let mut f = BufWriter::new(fs::File::create(path)?);
    f.write_all(&encode_snapshot(net, sidecar.iteration))?;
    f.flush()?;
    fs::write(sidecar_path(path), serde_json::to_string_pretty(sidecar)?)?;
    Ok(())
}

pub fn read_snapshot(path: &Path) -> Result<(NetParams, SnapshotSidecar)> {
    let sidecar: SnapshotSidecar = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let (net, iteration) = decode_snapshot(&bytes, &sidecar.config)?;
    if iteration != sidecar.iteration {
        return Err(Error::Invalid("snapshot iteration disagrees with sidecar".into()));
    }
    Ok((net, sidecar))
}
