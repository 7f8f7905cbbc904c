// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    // Activation and checkpoint files.
    #[error("bad magic {found:?} in {path} (expected {expected:?})")]
    BadMagic {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("unsupported format version {version} in {path}")]
    UnsupportedVersion { path: PathBuf, version: u32 },
    #[error("malformed header in {path}: {reason}")]
    BadHeader { path: PathBuf, reason: String },
    #[error("truncated payload in {path}: expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: u64,
        found: u64,
    },
    #[error("{extra} trailing bytes after payload in {path}")]
    TrailingBytes { path: PathBuf, extra: u64 },
    #[error("dimensions {dims:?} overflow the addressable size")]
    DimensionOverflow { dims: Vec<u64> },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    // Manifests and score files.
    #[error("{path}:{line}: {message}")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: unknown label {value:?}")]
    UnknownLabel {
        path: PathBuf,
        line: usize,
        value: String,
    },
    #[error("duplicate utt_id {0:?}")]
    DuplicateUttId(String),
    #[error("manifest {0} lists no utterances")]
    EmptyManifest(PathBuf),
    #[error("non-finite score for {0:?}")]
    NonFiniteScore(String),

    // Shapes and configuration.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("unknown corpus tag {0:?}")]
    UnknownCorpus(String),
    #[error("expected a {expected} head, found {found}")]
    WrongHeadKind {
        expected: &'static str,
        found: &'static str,
    },

    // Numerics.
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite value in {block}")]
    NonFiniteGradient { block: &'static str },
    #[error("non-finite Adam update in {block}")]
    NonFiniteUpdate { block: &'static str },
    #[error("training diverged at epoch {epoch}: {what} is not finite")]
    Divergence { epoch: usize, what: &'static str },
    #[error("{0} requires both bona fide and spoof trials")]
    SingleClass(&'static str),
    #[error("no label for trial {0:?}")]
    UnlabeledTrial(String),
    #[error("no score for trial {0:?}")]
    UnscoredTrial(String),
    #[error("trial sets differ: {0}")]
    TrialMismatch(String),
    #[error("fusion did not converge after {iterations} iterations (gradient norm {grad_norm:e})")]
    NonConvergence { iterations: usize, grad_norm: f64 },
    #[error("missing corpus tag {0:?}")]
    MissingTag(String),

    #[error("layer {layer}: {source}")]
    AtLayer {
        layer: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
