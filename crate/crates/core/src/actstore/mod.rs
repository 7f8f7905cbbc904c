// SPDX-License-Identifier: Apache-2.0

//! Activation tensors, manifests and score files.
//!
//! - LACT activation files: 24-byte little-endian header (`"LACT"`, version,
//!   layers, frames, features, reserved) followed by binary32 values in
//!   `[layer][frame][feature]` order.
//! - Manifests: JSONL, one utterance per line.
//! - Scores: `utt_id<TAB>score` lines without a header.

mod manifest;
mod scores;
mod tensor;

pub use manifest::{
    load_manifest, parse_manifest, save_manifest, Label, Manifest, Split, UtteranceRecord,
};
pub use scores::{format_score, load_scores, parse_scores, save_scores, scores_to_tsv, ScoreSet};
pub use tensor::{
    read_activation, read_activation_header, write_activation, ActivationTensor, LactHeader,
    LayerView, LACT_HEADER_LEN, LACT_MAGIC, LACT_VERSION,
};
