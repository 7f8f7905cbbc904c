// SPDX-License-Identifier: Apache-2.0

//! Head checkpoint files.
//!
//! Layout (little-endian): magic `"LHCK"`, then u32 words version, kind
//! (0 = mp, 1 = mhfa), embed_dim, n_heads, n_layers_in, feat_dim and input
//! layer (`u32::MAX` = all layers), a u64 configuration digest, and finally
//! every parameter block in declaration order as binary64.

use std::fs;
use std::path::Path;

use super::{Head, HeadConfig, HeadKind, HeadParams, LayerSelector};
use crate::error::{Error, Result};

pub const HEAD_MAGIC: &[u8; 4] = b"LHCK";
pub const HEAD_VERSION: u32 = 1;
pub const HEAD_HEADER_LEN: usize = 40;
const ALL_LAYERS: u32 = u32::MAX;

fn to_u32(value: usize, what: &str) -> Result<u32> {
    u32::try_from(value).map_err(|_| Error::InvalidConfig(format!("{what} {value} does not fit in u32")))
}

pub fn head_to_bytes(head: &Head, digest: u64) -> Result<Vec<u8>> {
    let config = head.params.config();
    let kind = match head.params.kind() {
        HeadKind::Mp => 0u32,
        HeadKind::Mhfa => 1,
    };
    let layer = match head.input {
        LayerSelector::All => ALL_LAYERS,
        LayerSelector::Single(l) => to_u32(l, "layer")?,
    };
    let mut out = Vec::with_capacity(HEAD_HEADER_LEN + 8 * head.params.num_params());
    out.extend_from_slice(HEAD_MAGIC);
    for word in [
        HEAD_VERSION,
        kind,
        to_u32(config.embed_dim, "embed_dim")?,
        to_u32(config.n_heads, "n_heads")?,
        to_u32(config.n_layers_in, "n_layers_in")?,
        to_u32(config.feat_dim, "feat_dim")?,
        layer,
    ] {
        out.extend_from_slice(&word.to_le_bytes());
    }
    out.extend_from_slice(&digest.to_le_bytes());
    for (_, block) in head.params.blocks() {
        for v in block {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses checkpoint bytes into the head and its stored digest.
pub fn head_from_bytes(bytes: &[u8], origin: &Path) -> Result<(Head, u64)> {
    if bytes.len() < 4 || &bytes[..4] != HEAD_MAGIC {
        return Err(Error::BadMagic {
            path: origin.to_path_buf(),
            expected: "LHCK".into(),
            found: String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned(),
        });
    }
    if bytes.len() < HEAD_HEADER_LEN {
        return Err(Error::Truncated {
            path: origin.to_path_buf(),
            expected: HEAD_HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    if word(1) != HEAD_VERSION {
        return Err(Error::UnsupportedVersion {
            path: origin.to_path_buf(),
            version: word(1),
        });
    }
    let bad = |reason: String| Error::BadHeader {
        path: origin.to_path_buf(),
        reason,
    };
    let kind = match word(2) {
        0 => HeadKind::Mp,
        1 => HeadKind::Mhfa,
        other => return Err(bad(format!("unknown head kind {other}"))),
    };
    let config = HeadConfig::new(word(3) as usize, word(4) as usize, word(5) as usize, word(6) as usize);
    config.validate().map_err(|e| bad(e.to_string()))?;
    let input = match word(7) {
        ALL_LAYERS => LayerSelector::All,
        l => LayerSelector::Single(l as usize),
    };
    let digest = u64::from_le_bytes(bytes[32..40].try_into().unwrap());

    let mut params = HeadParams::zeros(config, kind);
    let expected = HEAD_HEADER_LEN as u64 + 8 * params.num_params() as u64;
    let found = bytes.len() as u64;
    if found < expected {
        return Err(Error::Truncated {
            path: origin.to_path_buf(),
            expected,
            found,
        });
    }
    if found > expected {
        return Err(Error::TrailingBytes {
            path: origin.to_path_buf(),
            extra: found - expected,
        });
    }
    let flat: Vec<f64> = bytes[HEAD_HEADER_LEN..]
        .chunks_exact(8)
        .map(|w| f64::from_le_bytes(w.try_into().unwrap()))
        .collect();
    if let Some(index) = flat.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    params.set_flat(&flat)?;
    let head = Head::new(input, params).map_err(|e| bad(e.to_string()))?;
    Ok((head, digest))
}

pub fn write_head(head: &Head, digest: u64, path: &Path) -> Result<()> {
    if let Some(block) = head.params.first_non_finite() {
        return Err(Error::NonFiniteGradient { block });
    }
    let bytes = head_to_bytes(head, digest)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_head(path: &Path) -> Result<(Head, u64)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    head_from_bytes(&bytes, path)
}
