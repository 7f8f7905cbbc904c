// SPDX-License-Identifier: Apache-2.0

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::tensor::{read_activation, read_activation_header, ActivationTensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Bonafide,
    Spoof,
}

impl Label {
    /// Binary target: bona fide is the positive class.
    pub fn target(self) -> f64 {
        match self {
            Label::Bonafide => 1.0,
            Label::Spoof => 0.0,
        }
    }

    pub fn swapped(self) -> Self {
        match self {
            Label::Bonafide => Label::Spoof,
            Label::Spoof => Label::Bonafide,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Bonafide => "bonafide",
            Label::Spoof => "spoof",
        }
    }
}

impl FromStr for Label {
    type Err = ();

    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s {
            "bonafide" => Ok(Label::Bonafide),
            "spoof" => Ok(Label::Spoof),
            _ => Err(()),
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
    Fusion,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
            Split::Fusion => "fusion",
        }
    }
}

impl FromStr for Split {
    type Err = ();

    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            "fusion" => Ok(Split::Fusion),
            _ => Err(()),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct UtteranceRecord {
    pub utt_id: String,
    /// Activation file, relative to the manifest's directory.
    pub path: String,
    pub label: Label,
    pub corpus: String,
    pub attack: String,
    pub split: Split,
}

/// Line shape of the JSONL file; label and split stay strings so that
/// unknown values can be reported with their line number.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    utt_id: String,
    path: String,
    label: String,
    corpus: String,
    attack: String,
    split: String,
}

/// Ordered list of utterances sharing one backbone shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub records: Vec<UtteranceRecord>,
    pub backbone_tag: String,
    pub n_layers: usize,
    pub n_features: usize,
    /// Directory that record paths are relative to.
    pub root: PathBuf,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn activation_path(&self, record: &UtteranceRecord) -> PathBuf {
        self.root.join(&record.path)
    }

    /// Reads one record's activations and checks them against the manifest shape.
    pub fn load_activation(&self, record: &UtteranceRecord) -> Result<ActivationTensor> {
        let tensor = read_activation(&self.activation_path(record))?;
        if tensor.n_layers() != self.n_layers || tensor.n_features() != self.n_features {
            return Err(Error::ShapeMismatch(format!(
                "{}: {}x{} layers x features, manifest expects {}x{}",
                record.utt_id,
                tensor.n_layers(),
                tensor.n_features(),
                self.n_layers,
                self.n_features
            )));
        }
        Ok(tensor)
    }

    /// Counts of (bona fide, spoof) records.
    pub fn class_counts(&self) -> (usize, usize) {
        let bona = self.records.iter().filter(|r| r.label == Label::Bonafide).count();
        (bona, self.records.len() - bona)
    }

    /// Corpus tag of the first record.
    pub fn corpus_tag(&self) -> &str {
        self.records.first().map(|r| r.corpus.as_str()).unwrap_or("")
    }
}

/// Parses and validates a JSONL manifest.
///
/// Shapes are taken from the first activation file's header and every other
/// file's header is checked against them. The backbone tag is the name of the
/// directory holding the manifest.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let records = parse_manifest(&text, path)?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let backbone_tag = root
        .canonicalize()
        .ok()
        .and_then(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .unwrap_or_default();
    let first = records.first().ok_or_else(|| Error::EmptyManifest(path.to_path_buf()))?;
    let shape = read_activation_header(&root.join(&first.path))?;
    for record in &records[1..] {
        let h = read_activation_header(&root.join(&record.path))?;
        if h.n_layers != shape.n_layers || h.n_features != shape.n_features {
            return Err(Error::ShapeMismatch(format!(
                "{}: {}x{} layers x features, first record has {}x{}",
                record.utt_id, h.n_layers, h.n_features, shape.n_layers, shape.n_features
            )));
        }
    }
    Ok(Manifest {
        records,
        backbone_tag,
        n_layers: shape.n_layers,
        n_features: shape.n_features,
        root,
    })
}

/// Parses manifest text without touching activation files.
pub fn parse_manifest(text: &str, origin: &Path) -> Result<Vec<UtteranceRecord>> {
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| Error::MalformedLine {
            path: origin.to_path_buf(),
            line: line_no,
            message,
        };
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
        if raw.utt_id.is_empty() {
            return Err(malformed("empty utt_id".into()));
        }
        let label = raw.label.parse().map_err(|_| Error::UnknownLabel {
            path: origin.to_path_buf(),
            line: line_no,
            value: raw.label.clone(),
        })?;
        let split = raw
            .split
            .parse()
            .map_err(|_| malformed(format!("unknown split {:?}", raw.split)))?;
        if !seen.insert(raw.utt_id.clone()) {
            return Err(Error::DuplicateUttId(raw.utt_id));
        }
        records.push(UtteranceRecord {
            utt_id: raw.utt_id,
            path: raw.path,
            label,
            corpus: raw.corpus,
            attack: raw.attack,
            split,
        });
    }
    Ok(records)
}

/// Writes records as JSONL, one object per line.
pub fn save_manifest(records: &[UtteranceRecord], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("record serializes");
        out.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}
