// SPDX-License-Identifier: Apache-2.0

//! Capped full-utterance scoring, EER, per-layer probe sweeps, best
//! single-layer selection and MHFA layer-weight extraction.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::actstore::{ActivationTensor, Label, Manifest, ScoreSet, UtteranceRecord};
use crate::error::{Error, Result};
use crate::heads::{Head, HeadKind, HeadParams, LayerSelector};
use crate::seeds;
use crate::trainer::{train_on, Dataset, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub max_frames: usize,
    pub frames_per_second: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            max_frames: 1500,
            frames_per_second: 50,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_frames == 0 || self.frames_per_second == 0 {
            return Err(Error::InvalidConfig("max_frames and frames_per_second must be >= 1".into()));
        }
        Ok(())
    }
}

/// Detection score (head logit) of the first `max_frames` frames.
pub fn score_utterance(tensor: &ActivationTensor, head: &Head, config: &EvalConfig) -> Result<f64> {
    if tensor.n_frames() > config.max_frames {
        head.logit(&tensor.truncated(config.max_frames))
    } else {
        head.logit(tensor)
    }
}

/// Scores every record of a manifest in parallel.
pub fn score_manifest(manifest: &Manifest, head: &Head, config: &EvalConfig, system_tag: &str) -> Result<ScoreSet> {
    config.validate()?;
    let scores = manifest
        .records
        .par_iter()
        .map(|r| Ok((r.utt_id.clone(), score_utterance(&manifest.load_activation(r)?, head, config)?)))
        .collect::<Result<Vec<_>>>()?;
    ScoreSet::from_pairs(system_tag, scores)
}

/// Scores inputs that are already restricted to the layers `params` reads.
pub fn score_dataset(data: &Dataset, params: &HeadParams, config: &EvalConfig, system_tag: &str) -> Result<ScoreSet> {
    let scores = data
        .inputs
        .par_iter()
        .zip(&data.utt_ids)
        .map(|(t, id)| {
            let logit = if t.n_frames() > config.max_frames {
                params.logit(&t.truncated(config.max_frames))?
            } else {
                params.logit(t)?
            };
            Ok((id.clone(), logit))
        })
        .collect::<Result<Vec<_>>>()?;
    ScoreSet::from_pairs(system_tag, scores)
}

/// Equal error rate of bona fide and spoof score lists.
///
/// A threshold accepts scores at or above it. The (FRR, FAR) staircase is
/// evaluated at every distinct score and at +inf, and the crossing with
/// FRR = FAR is linearly interpolated between adjacent points.
pub fn eer(bona: &[f64], spoof: &[f64]) -> Result<f64> {
    if bona.is_empty() || spoof.is_empty() {
        return Err(Error::SingleClass("EER"));
    }
    if let Some(v) = bona.iter().chain(spoof).find(|v| !v.is_finite()) {
        return Err(Error::NonFiniteScore(v.to_string()));
    }
    let mut b = bona.to_vec();
    let mut s = spoof.to_vec();
    b.sort_by(f64::total_cmp);
    s.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = b.iter().chain(&s).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();

    let (nb, ns) = (b.len() as f64, s.len() as f64);
    let (mut ib, mut is) = (0usize, 0usize);
    let mut prev = (0.0, 1.0);
    for theta in thresholds.into_iter().skip(1).map(Some).chain([None]) {
        let point = match theta {
            Some(theta) => {
                while ib < b.len() && b[ib] < theta {
                    ib += 1;
                }
                while is < s.len() && s[is] < theta {
                    is += 1;
                }
                (ib as f64 / nb, (s.len() - is) as f64 / ns)
            }
            None => (1.0, 0.0),
        };
        let d1 = point.0 - point.1;
        if d1 >= 0.0 {
            if d1 == 0.0 {
                return Ok(point.0);
            }
            let d0 = prev.0 - prev.1;
            let t = -d0 / (d1 - d0);
            return Ok(prev.0 + t * (point.0 - prev.0));
        }
        prev = point;
    }
    unreachable!("the staircase ends at FRR = 1, FAR = 0")
}

/// EER of a score set against manifest labels. Every score needs a label
/// and every labelled trial needs a score.
pub fn compute_eer(scores: &ScoreSet, records: &[UtteranceRecord]) -> Result<f64> {
    let labels: HashMap<&str, Label> = records.iter().map(|r| (r.utt_id.as_str(), r.label)).collect();
    if let Some(id) = scores.entries.keys().find(|id| !labels.contains_key(id.as_str())) {
        return Err(Error::UnlabeledTrial(id.clone()));
    }
    let (mut bona, mut spoof) = (Vec::new(), Vec::new());
    for r in records {
        let score = scores.get(&r.utt_id).ok_or_else(|| Error::UnscoredTrial(r.utt_id.clone()))?;
        match r.label {
            Label::Bonafide => bona.push(score),
            Label::Spoof => spoof.push(score),
        }
    }
    eer(&bona, &spoof)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub layer: usize,
    pub corpus: String,
    pub eer: f64,
    pub n_trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSweepReport {
    pub backbone_tag: String,
    pub rows: Vec<SweepRow>,
    pub seed: u64,
    pub config_digest: String,
}

impl LayerSweepReport {
    /// CSV with header `backbone,layer,corpus,eer,n_trials`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("backbone,layer,corpus,eer,n_trials\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:.6},{}\n",
                self.backbone_tag, r.layer, r.corpus, r.eer, r.n_trials
            ));
        }
        out
    }

    /// Parses the CSV form. Seed and digest are not part of it and come back
    /// as 0 and empty.
    pub fn from_csv(text: &str, origin: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let bad = |line: usize, message: String| Error::MalformedLine {
            path: origin.to_path_buf(),
            line: line + 1,
            message,
        };
        match lines.next() {
            Some((_, "backbone,layer,corpus,eer,n_trials")) => {}
            _ => return Err(bad(0, "expected header backbone,layer,corpus,eer,n_trials".into())),
        }
        let mut backbone: Option<String> = None;
        let mut rows = Vec::new();
        for (i, line) in lines.filter(|(_, l)| !l.trim().is_empty()) {
            let fields: Vec<&str> = line.split(',').collect();
            let [tag, layer, corpus, eer, n] = fields[..] else {
                return Err(bad(i, format!("expected 5 fields, got {}", fields.len())));
            };
            match &backbone {
                Some(b) if b != tag => return Err(bad(i, format!("backbone {tag:?} differs from {b:?}"))),
                None => backbone = Some(tag.to_string()),
                _ => {}
            }
            let num_err = |what: &str| bad(i, format!("invalid {what}"));
            let eer: f64 = eer.parse().map_err(|_| num_err("eer"))?;
            if !(0.0..=1.0).contains(&eer) {
                return Err(num_err("eer"));
            }
            rows.push(SweepRow {
                layer: layer.parse().map_err(|_| num_err("layer"))?,
                corpus: corpus.to_string(),
                eer,
                n_trials: n.parse().map_err(|_| num_err("n_trials"))?,
            });
        }
        Ok(Self {
            backbone_tag: backbone.unwrap_or_default(),
            rows,
            seed: 0,
            config_digest: String::new(),
        })
    }

    pub fn layers(&self) -> Vec<usize> {
        let mut layers: Vec<usize> = self.rows.iter().map(|r| r.layer).collect();
        layers.sort_unstable();
        layers.dedup();
        layers
    }

    /// `(corpus, eer)` pairs of one layer.
    pub fn layer_eers(&self, layer: usize) -> Vec<(String, f64)> {
        self.rows
            .iter()
            .filter(|r| r.layer == layer)
            .map(|r| (r.corpus.clone(), r.eer))
            .collect()
    }
}

/// A labelled evaluation corpus held in memory.
#[derive(Debug, Clone)]
pub struct EvalCorpus {
    pub tag: String,
    pub data: Dataset,
}

/// Trains an MP probe on every layer and scores each evaluation corpus.
pub fn layer_sweep(
    train: &Manifest,
    val: &Manifest,
    eval_corpora: &[Manifest],
    config: &TrainConfig,
    eval_config: &EvalConfig,
) -> Result<LayerSweepReport> {
    config.validate()?;
    for m in std::iter::once(val).chain(eval_corpora) {
        if (m.n_layers, m.n_features) != (train.n_layers, train.n_features) {
            return Err(Error::ShapeMismatch(format!(
                "manifest for {:?} is {}x{}, training data is {}x{}",
                m.corpus_tag(),
                m.n_layers,
                m.n_features,
                train.n_layers,
                train.n_features
            )));
        }
    }
    let train_set = Dataset::load(train, LayerSelector::All, None)?;
    let val_set = Dataset::load(val, LayerSelector::All, Some(config.val_max_frames))?;
    let evals = eval_corpora
        .iter()
        .map(|m| {
            Ok(EvalCorpus {
                tag: m.corpus_tag().to_string(),
                data: Dataset::load(m, LayerSelector::All, Some(eval_config.max_frames))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut report = layer_sweep_datasets(&train_set, &val_set, &evals, config, eval_config)?;
    report.backbone_tag = train.backbone_tag.clone();
    Ok(report)
}

/// Sweep over in-memory all-layer datasets. The backbone tag is left empty.
///
/// Layer `l` is trained with a seed derived from `(config.seed, l)`, so rows
/// do not depend on the order in which layers run.
pub fn layer_sweep_datasets(
    train: &Dataset,
    val: &Dataset,
    eval_corpora: &[EvalCorpus],
    config: &TrainConfig,
    eval_config: &EvalConfig,
) -> Result<LayerSweepReport> {
    eval_config.validate()?;
    let per_layer = (0..train.backbone_layers)
        .into_par_iter()
        .map(|layer| {
            sweep_one_layer(layer, train, val, eval_corpora, config, eval_config).map_err(|e| Error::AtLayer {
                layer,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LayerSweepReport {
        backbone_tag: String::new(),
        rows: per_layer.into_iter().flatten().collect(),
        seed: config.seed,
        config_digest: crate::digest::config_digest(config),
    })
}

/// Seed used for the probe on `layer`.
pub fn layer_seed(seed: u64, layer: usize) -> u64 {
    seeds::derive_seed(seed, "layer", &[layer as u64])
}

fn sweep_one_layer(
    layer: usize,
    train: &Dataset,
    val: &Dataset,
    eval_corpora: &[EvalCorpus],
    config: &TrainConfig,
    eval_config: &EvalConfig,
) -> Result<Vec<SweepRow>> {
    let sel = LayerSelector::Single(layer);
    let layer_config = TrainConfig {
        seed: layer_seed(config.seed, layer),
        ..config.clone()
    };
    let outcome = train_on(&train.select(sel, None)?, &val.select(sel, None)?, HeadKind::Mp, &layer_config)?;
    eval_corpora
        .iter()
        .map(|corpus| {
            let data = corpus.data.select(sel, Some(eval_config.max_frames))?;
            let scores = score_dataset(&data, &outcome.best.head.params, eval_config, "probe")?;
            Ok(SweepRow {
                layer,
                corpus: corpus.tag.clone(),
                eer: dataset_eer(&scores, &data)?,
                n_trials: data.len(),
            })
        })
        .collect()
}

/// EER of scores against a dataset's labels.
pub fn dataset_eer(scores: &ScoreSet, data: &Dataset) -> Result<f64> {
    let (mut bona, mut spoof) = (Vec::new(), Vec::new());
    for (id, label) in data.utt_ids.iter().zip(&data.labels) {
        let s = scores.get(id).ok_or_else(|| Error::UnscoredTrial(id.clone()))?;
        match label {
            Label::Bonafide => bona.push(s),
            Label::Spoof => spoof.push(s),
        }
    }
    if scores.len() != data.len() {
        let extra = scores.entries.keys().find(|id| !data.utt_ids.contains(id)).cloned().unwrap_or_default();
        return Err(Error::UnlabeledTrial(extra));
    }
    eer(&bona, &spoof)
}

/// Layer whose mean EER over `ood_corpora` is lowest; ties go to the
/// smallest layer index.
pub fn select_best_single_layer(report: &LayerSweepReport, ood_corpora: &[&str]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for layer in report.layers() {
        let mean = average_eer(&report.layer_eers(layer), ood_corpora)?;
        if best.is_none_or(|(_, b)| mean < b) {
            best = Some((layer, mean));
        }
    }
    best.map(|(l, _)| l).ok_or_else(|| Error::InvalidConfig("empty sweep report".into()))
}

/// Unweighted mean of the EERs of `tags`, each of which must occur exactly
/// once in `eers`.
pub fn average_eer(eers: &[(String, f64)], tags: &[&str]) -> Result<f64> {
    if tags.is_empty() {
        return Err(Error::InvalidConfig("no corpus tags to average".into()));
    }
    let mut total = 0.0;
    for tag in tags {
        let mut found = eers.iter().filter(|(t, _)| t == tag);
        let (_, v) = found.next().ok_or_else(|| Error::MissingTag(tag.to_string()))?;
        if found.next().is_some() {
            return Err(Error::InvalidConfig(format!("corpus tag {tag:?} occurs more than once")));
        }
        total += v;
    }
    Ok(total / tags.len() as f64)
}

/// Normalized MHFA layer weights for keys and values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeightReport {
    pub w_k: Vec<f64>,
    pub w_v: Vec<f64>,
}

impl LayerWeightReport {
    /// CSV with header `layer,w_k,w_v`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,w_k,w_v\n");
        for (l, (k, v)) in self.w_k.iter().zip(&self.w_v).enumerate() {
            out.push_str(&format!("{l},{k:.16e},{v:.16e}\n"));
        }
        out
    }

    pub fn from_csv(text: &str, origin: &Path) -> Result<Self> {
        let bad = |line: usize, message: String| Error::MalformedLine {
            path: origin.to_path_buf(),
            line: line + 1,
            message,
        };
        let mut lines = text.lines().enumerate();
        if lines.next().map(|(_, l)| l) != Some("layer,w_k,w_v") {
            return Err(bad(0, "expected header layer,w_k,w_v".into()));
        }
        let (mut w_k, mut w_v) = (Vec::new(), Vec::new());
        for (i, line) in lines.filter(|(_, l)| !l.trim().is_empty()) {
            let fields: Vec<&str> = line.split(',').collect();
            let [layer, k, v] = fields[..] else {
                return Err(bad(i, format!("expected 3 fields, got {}", fields.len())));
            };
            if layer.parse::<usize>().ok() != Some(w_k.len()) {
                return Err(bad(i, format!("expected layer {}", w_k.len())));
            }
            w_k.push(k.parse().map_err(|_| bad(i, "invalid w_k".into()))?);
            w_v.push(v.parse().map_err(|_| bad(i, "invalid w_v".into()))?);
        }
        Ok(Self { w_k, w_v })
    }
}

pub fn extract_layer_weights(params: &HeadParams) -> Result<LayerWeightReport> {
    let (w_k, w_v) = params.as_mhfa()?.normalized_layer_weights();
    Ok(LayerWeightReport { w_k, w_v })
}

/// Plot data for per-layer EER curves: `x\tseries\ty` with x = layer and one
/// series per backbone and corpus.
pub fn sweep_plot_tsv(reports: &[LayerSweepReport]) -> String {
    let mut out = String::from("x\tseries\ty\n");
    for report in reports {
        let mut by_series: BTreeMap<&str, Vec<(usize, f64)>> = BTreeMap::new();
        for r in &report.rows {
            by_series.entry(&r.corpus).or_default().push((r.layer, r.eer));
        }
        for (corpus, mut points) in by_series {
            points.sort_by_key(|p| p.0);
            for (x, y) in points {
                out.push_str(&format!("{x}\t{}/{corpus}\t{y:.6}\n", report.backbone_tag));
            }
        }
    }
    out
}

/// Plot data for layer weights: `x\tseries\ty` with series `<backbone>/w_k`
/// and `<backbone>/w_v`.
pub fn weights_plot_tsv(reports: &[(String, LayerWeightReport)]) -> String {
    let mut out = String::from("x\tseries\ty\n");
    for (backbone, report) in reports {
        for (name, w) in [("w_k", &report.w_k), ("w_v", &report.w_v)] {
            for (x, y) in w.iter().enumerate() {
                out.push_str(&format!("{x}\t{backbone}/{name}\t{y:.6}\n"));
            }
        }
    }
    out
}
