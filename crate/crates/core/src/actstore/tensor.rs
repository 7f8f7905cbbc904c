// SPDX-License-Identifier: Apache-2.0

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Magic bytes opening every activation file.
pub const LACT_MAGIC: &[u8; 4] = b"LACT";
/// Current activation file version.
pub const LACT_VERSION: u32 = 1;
/// Fixed header length in bytes.
pub const LACT_HEADER_LEN: usize = 24;

/// Stack of per-layer activations of one utterance, `[layer][frame][feature]`.
///
/// Layer 0 is the convolutional front-end output, so a backbone with `L`
/// Transformer layers yields `L + 1` stored layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTensor {
    n_layers: usize,
    n_frames: usize,
    n_features: usize,
    values: Vec<f32>,
}

/// Borrowed `frames x features` slice of a single layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerView<'a> {
    pub n_frames: usize,
    pub n_features: usize,
    pub values: &'a [f32],
}

impl<'a> LayerView<'a> {
    pub fn frame(&self, t: usize) -> &'a [f32] {
        &self.values[t * self.n_features..(t + 1) * self.n_features]
    }
}

fn checked_len(n_layers: usize, n_frames: usize, n_features: usize) -> Result<usize> {
    n_layers
        .checked_mul(n_frames)
        .and_then(|n| n.checked_mul(n_features))
        .filter(|n| n.checked_mul(4).is_some())
        .ok_or(Error::DimensionOverflow {
            dims: vec![n_layers as u64, n_frames as u64, n_features as u64],
        })
}

impl ActivationTensor {
    pub fn new(n_layers: usize, n_frames: usize, n_features: usize, values: Vec<f32>) -> Result<Self> {
        if n_layers == 0 || n_frames == 0 || n_features == 0 {
            return Err(Error::InvalidTensor(format!(
                "dimensions must be >= 1, got {n_layers}x{n_frames}x{n_features}"
            )));
        }
        let len = checked_len(n_layers, n_frames, n_features)?;
        if values.len() != len {
            return Err(Error::InvalidTensor(format!(
                "{n_layers}x{n_frames}x{n_features} needs {len} values, got {}",
                values.len()
            )));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self {
            n_layers,
            n_frames,
            n_features,
            values,
        })
    }

    pub fn zeros(n_layers: usize, n_frames: usize, n_features: usize) -> Result<Self> {
        let len = checked_len(n_layers, n_frames, n_features)?;
        Self::new(n_layers, n_frames, n_features, vec![0.0; len])
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn layer(&self, layer: usize) -> LayerView<'_> {
        let stride = self.n_frames * self.n_features;
        LayerView {
            n_frames: self.n_frames,
            n_features: self.n_features,
            values: &self.values[layer * stride..(layer + 1) * stride],
        }
    }

    pub fn get(&self, layer: usize, frame: usize, feature: usize) -> f32 {
        self.values[(layer * self.n_frames + frame) * self.n_features + feature]
    }

    /// Builds a tensor from `frames` indices of every layer in `layers`.
    pub fn gather(&self, layers: &[usize], frames: &[usize]) -> Result<Self> {
        let mut values = Vec::with_capacity(layers.len() * frames.len() * self.n_features);
        for &l in layers {
            if l >= self.n_layers {
                return Err(Error::ShapeMismatch(format!(
                    "layer {l} out of range for {} layers",
                    self.n_layers
                )));
            }
            let view = self.layer(l);
            for &t in frames {
                values.extend_from_slice(view.frame(t));
            }
        }
        Self::new(layers.len(), frames.len(), self.n_features, values)
    }

    /// Keeps the first `max_frames` frames of every layer.
    pub fn truncated(&self, max_frames: usize) -> Self {
        if max_frames >= self.n_frames {
            return self.clone();
        }
        let keep = max_frames.max(1);
        let frames: Vec<usize> = (0..keep).collect();
        let layers: Vec<usize> = (0..self.n_layers).collect();
        self.gather(&layers, &frames).expect("in-range gather")
    }

    /// Serializes into the LACT byte layout.
    pub fn to_lact_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(LACT_HEADER_LEN + 4 * self.values.len());
        out.extend_from_slice(LACT_MAGIC);
        for word in [
            LACT_VERSION,
            self.n_layers as u32,
            self.n_frames as u32,
            self.n_features as u32,
            0,
        ] {
            out.extend_from_slice(&word.to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses LACT bytes; `origin` only labels errors.
    pub fn from_lact_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let header = LactHeader::parse(bytes, origin)?;
        let len = checked_len(header.n_layers, header.n_frames, header.n_features)?;
        let expected = LACT_HEADER_LEN as u64 + 4 * len as u64;
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
        let values = bytes[LACT_HEADER_LEN..]
            .chunks_exact(4)
            .map(|w| f32::from_le_bytes([w[0], w[1], w[2], w[3]]))
            .collect();
        Self::new(header.n_layers, header.n_frames, header.n_features, values)
    }
}

/// Decoded LACT header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LactHeader {
    pub n_layers: usize,
    pub n_frames: usize,
    pub n_features: usize,
}

impl LactHeader {
    fn parse(bytes: &[u8], origin: &Path) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != LACT_MAGIC {
            let found = String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned();
            return Err(Error::BadMagic {
                path: origin.to_path_buf(),
                expected: "LACT".into(),
                found,
            });
        }
        if bytes.len() < LACT_HEADER_LEN {
            return Err(Error::Truncated {
                path: origin.to_path_buf(),
                expected: LACT_HEADER_LEN as u64,
                found: bytes.len() as u64,
            });
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
        if word(1) != LACT_VERSION {
            return Err(Error::UnsupportedVersion {
                path: origin.to_path_buf(),
                version: word(1),
            });
        }
        if word(5) != 0 {
            return Err(Error::BadHeader {
                path: origin.to_path_buf(),
                reason: format!("reserved word is {} (must be 0)", word(5)),
            });
        }
        let header = LactHeader {
            n_layers: word(2) as usize,
            n_frames: word(3) as usize,
            n_features: word(4) as usize,
        };
        if header.n_layers == 0 || header.n_frames == 0 || header.n_features == 0 {
            return Err(Error::BadHeader {
                path: origin.to_path_buf(),
                reason: format!(
                    "zero dimension {}x{}x{}",
                    header.n_layers, header.n_frames, header.n_features
                ),
            });
        }
        Ok(header)
    }
}

/// Writes `tensor` to `path` in LACT format.
pub fn write_activation(tensor: &ActivationTensor, path: &Path) -> Result<()> {
    // Tensors are validated on construction; re-check in case of future mutators.
    if let Some(index) = tensor.values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    let bytes = tensor.to_lact_bytes();
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Reads a LACT file.
pub fn read_activation(path: &Path) -> Result<ActivationTensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    ActivationTensor::from_lact_bytes(&bytes, path)
}

/// Reads only the 24-byte header of a LACT file.
pub fn read_activation_header(path: &Path) -> Result<LactHeader> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::with_capacity(LACT_HEADER_LEN);
    Read::by_ref(&mut file)
        .take(LACT_HEADER_LEN as u64)
        .read_to_end(&mut buf)
        .map_err(|e| Error::io(path, e))?;
    LactHeader::parse(&buf, path)
}
