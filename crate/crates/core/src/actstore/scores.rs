// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Detection scores of one system, higher = more bona fide.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreSet {
    pub system_tag: String,
    pub entries: BTreeMap<String, f64>,
}

impl ScoreSet {
    pub fn new(system_tag: impl Into<String>) -> Self {
        Self {
            system_tag: system_tag.into(),
            entries: BTreeMap::new(),
        }
    }

    /// Builds a score set, rejecting duplicate ids and non-finite scores.
    pub fn from_pairs<I, S>(system_tag: impl Into<String>, pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, f64)>,
        S: Into<String>,
    {
        let mut set = Self::new(system_tag);
        for (id, score) in pairs {
            set.insert(id.into(), score)?;
        }
        Ok(set)
    }

    pub fn insert(&mut self, utt_id: String, score: f64) -> Result<()> {
        if !score.is_finite() {
            return Err(Error::NonFiniteScore(utt_id));
        }
        if self.entries.contains_key(&utt_id) {
            return Err(Error::DuplicateUttId(utt_id));
        }
        self.entries.insert(utt_id, score);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, utt_id: &str) -> Option<f64> {
        self.entries.get(utt_id).copied()
    }

    /// Applies `f` to every score.
    pub fn map(&self, system_tag: impl Into<String>, f: impl Fn(f64) -> f64) -> Self {
        Self {
            system_tag: system_tag.into(),
            entries: self.entries.iter().map(|(k, &v)| (k.clone(), f(v))).collect(),
        }
    }
}

/// Formats a score with 17 significant digits, enough to round-trip an f64.
pub fn format_score(score: f64) -> String {
    format!("{score:.16e}")
}

/// Renders `utt_id<TAB>score` lines, sorted by utt_id.
pub fn scores_to_tsv(scores: &ScoreSet) -> Result<String> {
    let mut out = String::new();
    for (id, &score) in &scores.entries {
        if !score.is_finite() {
            return Err(Error::NonFiniteScore(id.clone()));
        }
        out.push_str(id);
        out.push('\t');
        out.push_str(&format_score(score));
        out.push('\n');
    }
    Ok(out)
}

pub fn save_scores(scores: &ScoreSet, path: &Path) -> Result<()> {
    let text = scores_to_tsv(scores)?;
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Parses score TSV text; `origin` labels errors.
pub fn parse_scores(text: &str, system_tag: &str, origin: &Path) -> Result<ScoreSet> {
    let mut set = ScoreSet::new(system_tag);
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| Error::MalformedLine {
            path: origin.to_path_buf(),
            line: i + 1,
            message,
        };
        let (id, value) = line
            .split_once('\t')
            .ok_or_else(|| malformed("expected utt_id<TAB>score".into()))?;
        if id.is_empty() {
            return Err(malformed("empty utt_id".into()));
        }
        let score: f64 = value
            .trim()
            .parse()
            .map_err(|_| malformed(format!("bad score {value:?}")))?;
        set.insert(id.to_string(), score)?;
    }
    Ok(set)
}

/// Loads a score TSV; the system tag defaults to the file stem.
pub fn load_scores(path: &Path) -> Result<ScoreSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let tag = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_scores(&text, &tag, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_scores_roundtrip() {
        let set = ScoreSet::from_pairs("sys", [("u1", 1.25), ("u2", -0.5)]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sys.tsv");
        save_scores(&set, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.lines().all(|l| l.split('\t').count() == 2));
        let back = load_scores(&path).unwrap();
        assert_eq!(back, set);
    }

    #[test]
    fn printed_precision() {
        let s = format_score(1.25);
        let digits = s.split('e').next().unwrap().chars().filter(char::is_ascii_digit).count();
        assert!(digits >= 12, "{s}");
        assert!(!s.contains(','));
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(
            parse_scores("a\t1\nb 2\n", "s", Path::new("f")),
            Err(Error::MalformedLine { line: 2, .. })
        ));
        assert!(matches!(
            parse_scores("a\tx\n", "s", Path::new("f")),
            Err(Error::MalformedLine { line: 1, .. })
        ));
        assert!(matches!(
            parse_scores("a\t1\na\t2\n", "s", Path::new("f")),
            Err(Error::DuplicateUttId(_))
        ));
        assert!(matches!(
            parse_scores("a\tNaN\n", "s", Path::new("f")),
            Err(Error::NonFiniteScore(_))
        ));
    }

    proptest! {
        #[test]
        fn tsv_roundtrip_is_exact(scores in prop::collection::btree_map("[a-z0-9_]{1,8}", -1e6f64..1e6, 0..20)) {
            let set = ScoreSet { system_tag: "s".into(), entries: scores };
            let text = scores_to_tsv(&set).unwrap();
            let back = parse_scores(&text, "s", Path::new("p")).unwrap();
            prop_assert_eq!(back, set);
        }
    }
}
