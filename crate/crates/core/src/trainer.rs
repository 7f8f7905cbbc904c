// SPDX-License-Identifier: Apache-2.0

//! Segment sampling, Adam, and the epoch loop with min-validation-loss
//! checkpoint selection.
//!
//! Randomness comes from streams derived from `TrainConfig::seed`: one for
//! initialization, one per epoch for shuffling, one per (epoch, utterance)
//! for segment offsets. Items in a batch are processed in parallel but
//! reduced in batch order, so results do not depend on the thread count.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::actstore::{ActivationTensor, Label, Manifest};
use crate::error::{Error, Result};
use crate::evalkit::eer;
use crate::heads::{bce_with_logits, init_params, loss_and_grad, Example, Head, HeadConfig, HeadKind, HeadParams, LayerSelector};
use crate::seeds;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Training segment length `W` in frames.
    pub segment_frames: usize,
    pub frames_per_second: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub min_epochs: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub pos_class_weight: f64,
    pub embed_dim: usize,
    pub n_heads: usize,
    /// Frame cap applied to validation utterances.
    pub val_max_frames: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            segment_frames: 150,
            frames_per_second: 50,
            lr: 1e-4,
            beta1: 0.90,
            beta2: 0.98,
            epsilon: 1e-8,
            weight_decay: 2e-6,
            min_epochs: 6,
            max_epochs: 10,
            seed: 0,
            pos_class_weight: 1.0,
            embed_dim: 128,
            n_heads: 8,
            val_max_frames: 1500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad(format!("betas must lie in (0, 1), got {} and {}", self.beta1, self.beta2));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.epsilon > 0.0 && self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("epsilon must be positive and weight_decay non-negative".into());
        }
        if !(self.pos_class_weight > 0.0 && self.pos_class_weight.is_finite()) {
            return bad(format!("pos_class_weight must be positive, got {}", self.pos_class_weight));
        }
        if self.segment_frames == 0 || self.batch_size == 0 || self.frames_per_second == 0 || self.val_max_frames == 0 {
            return bad("segment_frames, batch_size, frames_per_second and val_max_frames must be >= 1".into());
        }
        if self.max_epochs == 0 || self.min_epochs > self.max_epochs {
            return bad(format!(
                "need 1 <= max_epochs and min_epochs <= max_epochs, got {} and {}",
                self.min_epochs, self.max_epochs
            ));
        }
        Ok(())
    }

    fn loss_weight(&self, label: Label) -> f64 {
        match label {
            Label::Bonafide => self.pos_class_weight,
            Label::Spoof => 1.0,
        }
    }
}

/// Adam moments over the flattened parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        Self {
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }
}

/// One Adam update with bias correction; weight decay is added to the
/// gradient as an L2 term. Parameters and state are left untouched when the
/// update would produce a non-finite value.
pub fn adam_step(params: &mut HeadParams, grads: &HeadParams, state: &mut AdamState, config: &TrainConfig) -> Result<()> {
    let n = params.num_params();
    if grads.num_params() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "adam: {n} parameters, {} gradients, {} moments",
            grads.num_params(),
            state.m.len()
        )));
    }
    let step = state.step + 1;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powf(step as f64);
    let c2 = 1.0 - b2.powf(step as f64);
    let mut theta = params.to_flat();
    let mut m = state.m.clone();
    let mut v = state.v.clone();
    for (i, g) in grads.blocks().into_iter().flat_map(|(_, b)| b.iter()).enumerate() {
        let g = g + config.weight_decay * theta[i];
        m[i] = b1 * m[i] + (1.0 - b1) * g;
        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
        theta[i] -= config.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + config.epsilon);
    }
    let mut updated = params.clone();
    updated.set_flat(&theta)?;
    if let Some(block) = updated.first_non_finite() {
        return Err(Error::NonFiniteUpdate { block });
    }
    *params = updated;
    *state = AdamState { step, m, v };
    Ok(())
}

/// A `W`-frame training segment of the selected layers.
///
/// Utterances at least `W` long yield a uniformly placed window; shorter
/// ones are repeated cyclically from frame 0.
pub fn sample_segment<R: Rng>(
    tensor: &ActivationTensor,
    layers: LayerSelector,
    segment_frames: usize,
    rng: &mut R,
) -> Result<ActivationTensor> {
    let t = tensor.n_frames();
    let frames: Vec<usize> = if t >= segment_frames {
        let start = if t == segment_frames { 0 } else { rng.random_range(0..=t - segment_frames) };
        (start..start + segment_frames).collect()
    } else {
        (0..segment_frames).map(|i| i % t).collect()
    };
    tensor.gather(&layers.layers(tensor.n_layers()), &frames)
}

/// In-memory labelled activations, already restricted to the layers a head
/// reads.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub utt_ids: Vec<String>,
    pub inputs: Vec<ActivationTensor>,
    pub labels: Vec<Label>,
    /// Backbone layers the inputs were taken from.
    pub layers: LayerSelector,
    /// Layer count of the full backbone tensors.
    pub backbone_layers: usize,
}

impl Dataset {
    /// Loads every record of `manifest` in parallel, keeping at most
    /// `max_frames` frames of each.
    pub fn load(manifest: &Manifest, layers: LayerSelector, max_frames: Option<usize>) -> Result<Self> {
        check_layer(layers, manifest.n_layers)?;
        let inputs = manifest
            .records
            .par_iter()
            .map(|r| restrict(&cap(manifest.load_activation(r)?, max_frames), layers))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            utt_ids: manifest.records.iter().map(|r| r.utt_id.clone()).collect(),
            inputs,
            labels: manifest.records.iter().map(|r| r.label).collect(),
            layers,
            backbone_layers: manifest.n_layers,
        })
    }

    /// Builds a dataset from full backbone tensors.
    pub fn from_tensors(utt_ids: Vec<String>, inputs: Vec<ActivationTensor>, labels: Vec<Label>) -> Result<Self> {
        if utt_ids.len() != inputs.len() || labels.len() != inputs.len() {
            return Err(Error::ShapeMismatch("ids, tensors and labels differ in length".into()));
        }
        let backbone_layers = inputs.first().map_or(0, |t| t.n_layers());
        let shape = inputs.first().map(|t| (t.n_layers(), t.n_features()));
        if inputs.iter().any(|t| Some((t.n_layers(), t.n_features())) != shape) {
            return Err(Error::ShapeMismatch("tensors differ in layers or features".into()));
        }
        Ok(Self {
            utt_ids,
            inputs,
            labels,
            layers: LayerSelector::All,
            backbone_layers,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Copy restricted to `layers` of an all-layer dataset, optionally capped
    /// to `max_frames`.
    pub fn select(&self, layers: LayerSelector, max_frames: Option<usize>) -> Result<Self> {
        if self.layers != LayerSelector::All && self.layers != layers {
            return Err(Error::InvalidConfig(format!(
                "cannot select {layers:?} from a dataset holding {:?}",
                self.layers
            )));
        }
        let restricting = self.layers == LayerSelector::All && layers != LayerSelector::All;
        if restricting {
            check_layer(layers, self.backbone_layers)?;
        }
        let inputs = self
            .inputs
            .par_iter()
            .map(|t| {
                let t = cap(t.clone(), max_frames);
                if restricting {
                    restrict(&t, layers)
                } else {
                    Ok(t)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            inputs,
            layers,
            ..self.clone_meta()
        })
    }

    /// Same data with bona fide and spoof exchanged.
    pub fn swapped_labels(&self) -> Self {
        Self {
            labels: self.labels.iter().map(|l| l.swapped()).collect(),
            ..self.clone()
        }
    }

    fn clone_meta(&self) -> Self {
        Self {
            utt_ids: self.utt_ids.clone(),
            inputs: Vec::new(),
            labels: self.labels.clone(),
            layers: self.layers,
            backbone_layers: self.backbone_layers,
        }
    }

    fn has_both_classes(&self) -> bool {
        self.labels.contains(&Label::Bonafide) && self.labels.contains(&Label::Spoof)
    }
}

fn cap(t: ActivationTensor, max_frames: Option<usize>) -> ActivationTensor {
    match max_frames {
        Some(m) if m < t.n_frames() => t.truncated(m),
        _ => t,
    }
}

fn check_layer(layers: LayerSelector, n_layers: usize) -> Result<()> {
    match layers {
        LayerSelector::Single(l) if l >= n_layers => {
            Err(Error::InvalidConfig(format!("layer {l} out of range for {n_layers} layers")))
        }
        _ => Ok(()),
    }
}

fn restrict(t: &ActivationTensor, layers: LayerSelector) -> Result<ActivationTensor> {
    match layers {
        LayerSelector::All => Ok(t.clone()),
        LayerSelector::Single(l) => {
            let frames: Vec<usize> = (0..t.n_frames()).collect();
            t.gather(&[l], &frames)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// 1-based epoch after which the parameters were taken.
    pub epoch: usize,
    pub head: Head,
    pub val_loss: f64,
    pub val_eer: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_eer: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub history: Vec<EpochRecord>,
}

/// History as CSV with header `epoch,train_loss,val_loss,val_eer`.
pub fn history_to_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,val_eer\n");
    for r in history {
        out.push_str(&format!(
            "{},{:.16e},{:.16e},{:.16e}\n",
            r.epoch, r.train_loss, r.val_loss, r.val_eer
        ));
    }
    out
}

/// Trains a head on the activations listed in `train`, validating on `val`.
pub fn train_head(
    train: &Manifest,
    val: &Manifest,
    kind: HeadKind,
    layers: LayerSelector,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if (train.n_layers, train.n_features) != (val.n_layers, val.n_features) {
        return Err(Error::ShapeMismatch(format!(
            "train is {}x{}, validation is {}x{} (layers x features)",
            train.n_layers, train.n_features, val.n_layers, val.n_features
        )));
    }
    let train_set = Dataset::load(train, layers, None)?;
    let val_set = Dataset::load(val, layers, Some(config.val_max_frames))?;
    train_on(&train_set, &val_set, kind, config)
}

/// Trains on prepared datasets from a fresh initialization.
pub fn train_on(train: &Dataset, val: &Dataset, kind: HeadKind, config: &TrainConfig) -> Result<TrainOutcome> {
    let n_features = train.inputs.first().ok_or(Error::SingleClass("training"))?.n_features();
    let head_config = HeadConfig::new(config.embed_dim, config.n_heads, train.backbone_layers, n_features);
    let init = init_params(head_config, kind, config.seed)?;
    train_from(train, val, init, config)
}

/// Trains starting from the given parameters.
pub fn train_from(train: &Dataset, val: &Dataset, init: HeadParams, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if !train.has_both_classes() {
        return Err(Error::SingleClass("training"));
    }
    if !val.has_both_classes() {
        return Err(Error::SingleClass("validation"));
    }
    if (val.layers, val.backbone_layers) != (train.layers, train.backbone_layers) {
        return Err(Error::ShapeMismatch("training and validation read different layers".into()));
    }
    let head_config = init.config();
    if head_config.n_layers_in != train.backbone_layers {
        return Err(Error::ShapeMismatch(format!(
            "head expects {} backbone layers, data has {}",
            head_config.n_layers_in, train.backbone_layers
        )));
    }
    let input_layers = match init.kind() {
        HeadKind::Mp => 1,
        HeadKind::Mhfa => head_config.n_layers_in,
    };
    for (what, set) in [("training", train), ("validation", val)] {
        if set.inputs.iter().any(|t| (t.n_layers(), t.n_features()) != (input_layers, head_config.feat_dim)) {
            return Err(Error::ShapeMismatch(format!(
                "{what} inputs do not match head input {input_layers}x{}",
                head_config.feat_dim
            )));
        }
    }
    Head::new(train.layers, init.clone())?;

    let mut params = init;
    let mut adam = AdamState::new(params.num_params());
    let mut history = Vec::with_capacity(config.max_epochs);
    let mut best: Option<(usize, HeadParams, f64, f64)> = None;

    for epoch in 1..=config.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut seeds::stream(config.seed, "shuffle", &[epoch as u64]));

        let mut loss_sum = 0.0;
        for batch_idx in order.chunks(config.batch_size) {
            let segments = batch_idx
                .par_iter()
                .map(|&i| {
                    let mut rng = seeds::stream(config.seed, "segment", &[epoch as u64, i as u64]);
                    sample_segment(&train.inputs[i], LayerSelector::All, config.segment_frames, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            let batch: Vec<Example<'_>> = batch_idx
                .iter()
                .zip(&segments)
                .map(|(&i, seg)| Example {
                    input: seg,
                    target: train.labels[i].target(),
                    weight: config.loss_weight(train.labels[i]),
                })
                .collect();
            let (loss, grads) = loss_and_grad(&batch, &params).map_err(|e| diverged(e, epoch))?;
            adam_step(&mut params, &grads, &mut adam, config).map_err(|e| diverged(e, epoch))?;
            loss_sum += loss * batch.len() as f64;
        }
        let train_loss = loss_sum / train.len() as f64;

        let (val_loss, val_eer) = validation_metrics(&params, val).map_err(|e| diverged(e, epoch))?;
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_eer,
        });
        if best.as_ref().is_none_or(|b| val_loss < b.2) {
            best = Some((epoch, params.clone(), val_loss, val_eer));
        }
    }

    let (epoch, params, val_loss, val_eer) = best.expect("max_epochs >= 1");
    Ok(TrainOutcome {
        best: Checkpoint {
            epoch,
            head: Head::new(train.layers, params)?,
            val_loss,
            val_eer,
        },
        history,
    })
}

fn diverged(err: Error, epoch: usize) -> Error {
    match err {
        Error::NonFiniteGradient { block } | Error::NonFiniteUpdate { block } => Error::Divergence { epoch, what: block },
        other => other,
    }
}

/// Unweighted mean BCE and EER of full (capped) validation utterances.
fn validation_metrics(params: &HeadParams, val: &Dataset) -> Result<(f64, f64)> {
    let logits = val.inputs.par_iter().map(|t| params.logit(t)).collect::<Result<Vec<_>>>()?;
    let mut loss = 0.0;
    let (mut bona, mut spoof) = (Vec::new(), Vec::new());
    for (z, label) in logits.iter().zip(&val.labels) {
        loss += bce_with_logits(*z, label.target()).0;
        match label {
            Label::Bonafide => bona.push(*z),
            Label::Spoof => spoof.push(*z),
        }
    }
    let loss = loss / val.len() as f64;
    if !loss.is_finite() {
        return Err(Error::NonFiniteGradient { block: "validation loss" });
    }
    Ok((loss, eer(&bona, &spoof)?))
}
