// SPDX-License-Identifier: Apache-2.0

//! Synthetic activation corpora with controllable per-layer separability.
//!
//! Each frame of layer `l` is drawn i.i.d. as
//!
//! ```text
//! x = c * (delta_l * scale_l / 2) * u_l + m_l + sigma * n,   n ~ N(0, I)
//! ```
//!
//! with `c = +1` for bona fide and `-1` for spoof, `u_l` a random unit
//! direction per layer shared by all corpora, and `m_l` a corpus-specific
//! offset. Mean pooling over `T` frames then gives two Gaussians whose
//! optimal linear EER is [`oracle_eer`].

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::actstore::{
    save_manifest, write_activation, ActivationTensor, Label, Split, UtteranceRecord,
};
use crate::error::{Error, Result};
use crate::seeds;

/// Per-layer separability multiplier; a bare number applies to every layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LayerScale {
    Uniform(f64),
    PerLayer(Vec<f64>),
}

impl LayerScale {
    pub fn at(&self, layer: usize) -> f64 {
        match self {
            LayerScale::Uniform(s) => *s,
            LayerScale::PerLayer(v) => v[layer],
        }
    }
}

impl Default for LayerScale {
    fn default() -> Self {
        LayerScale::Uniform(1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusShift {
    pub corpus_tag: String,
    #[serde(default)]
    pub separability_scale: LayerScale,
    #[serde(default)]
    pub mean_offset_scale: f64,
}

impl CorpusShift {
    pub fn new(corpus_tag: impl Into<String>, separability_scale: f64, mean_offset_scale: f64) -> Self {
        Self {
            corpus_tag: corpus_tag.into(),
            separability_scale: LayerScale::Uniform(separability_scale),
            mean_offset_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthProfile {
    pub n_layers: usize,
    pub n_features: usize,
    /// Inclusive `[min, max]` frame count per utterance.
    pub frames_per_utt: [usize; 2],
    pub separability: Vec<f64>,
    pub noise_sigma: f64,
    pub corpora: Vec<CorpusShift>,
    pub seed: u64,
}

/// One block of utterances to generate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusRequest {
    pub corpus_tag: String,
    pub split: Split,
    pub n_bona: usize,
    pub n_spoof: usize,
}

impl CorpusRequest {
    pub fn new(corpus_tag: impl Into<String>, split: Split, n_bona: usize, n_spoof: usize) -> Self {
        Self {
            corpus_tag: corpus_tag.into(),
            split,
            n_bona,
            n_spoof,
        }
    }
}

/// A generated utterance.
#[derive(Debug, Clone)]
pub struct SynthUtterance {
    pub record: UtteranceRecord,
    pub tensor: ActivationTensor,
}

impl SynthProfile {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_layers == 0 || self.n_features == 0 {
            return bad("n_layers and n_features must be >= 1".into());
        }
        if self.separability.len() != self.n_layers {
            return bad(format!(
                "separability has {} entries for {} layers",
                self.separability.len(),
                self.n_layers
            ));
        }
        if self.separability.iter().any(|d| !d.is_finite() || *d < 0.0) {
            return bad("separability entries must be finite and >= 0".into());
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma > 0.0) {
            return bad("noise_sigma must be > 0".into());
        }
        let [lo, hi] = self.frames_per_utt;
        if lo == 0 || lo > hi {
            return bad(format!("frames_per_utt [{lo}, {hi}] must satisfy 1 <= min <= max"));
        }
        let mut tags = std::collections::HashSet::new();
        for c in &self.corpora {
            if !tags.insert(c.corpus_tag.as_str()) {
                return bad(format!("corpus {:?} listed twice", c.corpus_tag));
            }
            if !(c.mean_offset_scale.is_finite() && c.mean_offset_scale >= 0.0) {
                return bad(format!("corpus {:?}: mean_offset_scale must be >= 0", c.corpus_tag));
            }
            let scales: Vec<f64> = match &c.separability_scale {
                LayerScale::Uniform(s) => vec![*s],
                LayerScale::PerLayer(v) => {
                    if v.len() != self.n_layers {
                        return bad(format!(
                            "corpus {:?}: separability_scale has {} entries for {} layers",
                            c.corpus_tag,
                            v.len(),
                            self.n_layers
                        ));
                    }
                    v.clone()
                }
            };
            if scales.iter().any(|s| !s.is_finite() || *s < 0.0) {
                return bad(format!("corpus {:?}: scales must be finite and >= 0", c.corpus_tag));
            }
        }
        Ok(())
    }

    pub fn corpus(&self, tag: &str) -> Result<&CorpusShift> {
        self.corpora
            .iter()
            .find(|c| c.corpus_tag == tag)
            .ok_or_else(|| Error::UnknownCorpus(tag.to_string()))
    }

    /// Unit class direction of `layer`, shared by every corpus.
    pub fn direction(&self, layer: usize) -> Vec<f64> {
        let mut rng = seeds::stream(self.seed, "direction", &[layer as u64]);
        random_unit(&mut rng, self.n_features)
    }

    /// Corpus offset `m_l` (zero when the corpus has no offset).
    pub fn offset(&self, corpus: &CorpusShift, layer: usize) -> Vec<f64> {
        let mut rng = seeds::stream(self.seed, &format!("offset/{}", corpus.corpus_tag), &[layer as u64]);
        random_unit(&mut rng, self.n_features)
            .into_iter()
            .map(|v| v * corpus.mean_offset_scale)
            .collect()
    }

    /// Class-mean distance `delta_l * scale_l` of `layer` in `corpus`.
    pub fn effective_separability(&self, corpus: &CorpusShift, layer: usize) -> f64 {
        self.separability[layer] * corpus.separability_scale.at(layer)
    }
}

fn random_unit<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Stable utterance id shared across backbones, so that systems built on
/// different profiles score the same trials.
pub fn utt_id(corpus_tag: &str, split: Split, index: usize) -> String {
    format!("{corpus_tag}_{split}_{index:06}")
}

/// Generates one utterance; the first `n_bona` indices are bona fide.
fn generate_utterance(
    profile: &SynthProfile,
    corpus: &CorpusShift,
    request: &CorpusRequest,
    directions: &[Vec<f64>],
    offsets: &[Vec<f64>],
    index: usize,
) -> Result<SynthUtterance> {
    let label = if index < request.n_bona {
        Label::Bonafide
    } else {
        Label::Spoof
    };
    let sign = if label == Label::Bonafide { 1.0 } else { -1.0 };
    let stream_label = format!("frames/{}/{}", corpus.corpus_tag, request.split);
    let [lo, hi] = profile.frames_per_utt;
    let n_frames = seeds::stream(profile.seed, &format!("length/{}/{}", corpus.corpus_tag, request.split), &[
        index as u64,
    ])
    .random_range(lo..=hi);

    let f = profile.n_features;
    let mut values = Vec::with_capacity(profile.n_layers * n_frames * f);
    for layer in 0..profile.n_layers {
        let mut rng = seeds::stream(profile.seed, &stream_label, &[index as u64, layer as u64]);
        let half = sign * profile.effective_separability(corpus, layer) / 2.0;
        let mean: Vec<f64> = directions[layer]
            .iter()
            .zip(&offsets[layer])
            .map(|(u, m)| half * u + m)
            .collect();
        for _ in 0..n_frames {
            for mu in &mean {
                let noise: f64 = rng.sample(StandardNormal);
                values.push((mu + profile.noise_sigma * noise) as f32);
            }
        }
    }
    let id = utt_id(&corpus.corpus_tag, request.split, index);
    Ok(SynthUtterance {
        record: UtteranceRecord {
            path: format!("{}/{}/{id}.lact", corpus.corpus_tag, request.split),
            utt_id: id,
            label,
            corpus: corpus.corpus_tag.clone(),
            attack: if label == Label::Spoof { "synth".into() } else { String::new() },
            split: request.split,
        },
        tensor: ActivationTensor::new(profile.n_layers, n_frames, f, values)?,
    })
}

/// Generates a corpus block in memory; deterministic per utterance.
pub fn generate_corpus(profile: &SynthProfile, request: &CorpusRequest) -> Result<Vec<SynthUtterance>> {
    profile.validate()?;
    if request.n_bona == 0 || request.n_spoof == 0 {
        return Err(Error::InvalidConfig("n_bona and n_spoof must be >= 1".into()));
    }
    let corpus = profile.corpus(&request.corpus_tag)?;
    let directions: Vec<Vec<f64>> = (0..profile.n_layers).map(|l| profile.direction(l)).collect();
    let offsets: Vec<Vec<f64>> = (0..profile.n_layers).map(|l| profile.offset(corpus, l)).collect();
    (0..request.n_bona + request.n_spoof)
        .into_par_iter()
        .map(|i| generate_utterance(profile, corpus, request, &directions, &offsets, i))
        .collect()
}

/// Writes a generated block under `out_dir` and returns its records.
///
/// Activations go to `<corpus>/<split>/<utt_id>.lact` and the manifest to
/// `<corpus>_<split>.jsonl`, both relative to `out_dir`.
pub fn write_corpus(profile: &SynthProfile, request: &CorpusRequest, out_dir: &Path) -> Result<Vec<UtteranceRecord>> {
    let utterances = generate_corpus(profile, request)?;
    let dir = out_dir.join(&request.corpus_tag).join(request.split.as_str());
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    utterances
        .par_iter()
        .try_for_each(|u| write_activation(&u.tensor, &out_dir.join(&u.record.path)))?;
    let records: Vec<UtteranceRecord> = utterances.into_iter().map(|u| u.record).collect();
    let manifest = out_dir.join(format!("{}_{}.jsonl", request.corpus_tag, request.split));
    save_manifest(&records, &manifest)?;
    Ok(records)
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// EER of the optimal linear detector on mean-pooled features:
/// `Phi(-delta * sqrt(n_frames) / (2 sigma))`.
pub fn oracle_eer(delta: f64, sigma: f64, n_frames: usize) -> f64 {
    assert!(delta.is_finite() && delta >= 0.0, "delta must be finite and >= 0");
    assert!(sigma.is_finite() && sigma > 0.0, "sigma must be > 0");
    assert!(n_frames >= 1, "n_frames must be >= 1");
    normal_cdf(-delta * (n_frames as f64).sqrt() / (2.0 * sigma))
}
