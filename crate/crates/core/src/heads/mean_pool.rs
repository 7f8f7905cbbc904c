// SPDX-License-Identifier: Apache-2.0

use super::HeadConfig;
use crate::actstore::LayerView;
use crate::error::{Error, Result};

/// Mean-pooling head: `e = mean_t(z_t W + b)`, `logit = c . e + c0`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanPoolParams {
    pub config: HeadConfig,
    /// `F x D`, row-major.
    pub proj_weight: Vec<f64>,
    pub proj_bias: Vec<f64>,
    pub cls_weight: Vec<f64>,
    pub cls_bias: f64,
}

impl MeanPoolParams {
    pub fn zeros(config: HeadConfig) -> Self {
        let (f, d) = (config.feat_dim, config.embed_dim);
        Self {
            config,
            proj_weight: vec![0.0; f * d],
            proj_bias: vec![0.0; d],
            cls_weight: vec![0.0; d],
            cls_bias: 0.0,
        }
    }

    pub fn blocks(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("proj_weight", &self.proj_weight),
            ("proj_bias", &self.proj_bias),
            ("cls_weight", &self.cls_weight),
            ("cls_bias", std::slice::from_ref(&self.cls_bias)),
        ]
    }

    pub fn blocks_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            ("proj_weight", &mut self.proj_weight),
            ("proj_bias", &mut self.proj_bias),
            ("cls_weight", &mut self.cls_weight),
            ("cls_bias", std::slice::from_mut(&mut self.cls_bias)),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpOutput {
    pub embedding: Vec<f64>,
    pub logit: f64,
    /// Temporal mean of the input frames (cached for the backward pass).
    pub mean_input: Vec<f64>,
}

/// Per-feature mean over frames.
///
/// Each column is summed in sorted order, so the result is exactly
/// invariant to frame permutations.
pub fn mean_frame(z: LayerView<'_>) -> Vec<f64> {
    let mut column = Vec::with_capacity(z.n_frames);
    (0..z.n_features)
        .map(|j| {
            column.clear();
            column.extend((0..z.n_frames).map(|t| z.values[t * z.n_features + j] as f64));
            column.sort_by(f64::total_cmp);
            column.iter().sum::<f64>() / z.n_frames as f64
        })
        .collect()
}

/// Forward pass on one layer's `T x F` frames.
///
/// The projection is linear, so projecting the frame mean is the same as
/// averaging the projected frames.
pub fn mp_forward(z: LayerView<'_>, params: &MeanPoolParams) -> Result<MpOutput> {
    let (f, d) = (params.config.feat_dim, params.config.embed_dim);
    if z.n_features != f {
        return Err(Error::ShapeMismatch(format!(
            "input has {} features, head expects {f}",
            z.n_features
        )));
    }
    if z.n_frames == 0 {
        return Err(Error::ShapeMismatch("input has no frames".into()));
    }
    let mean_input = mean_frame(z);
    let mut embedding = params.proj_bias.clone();
    for (j, &x) in mean_input.iter().enumerate() {
        let row = &params.proj_weight[j * d..(j + 1) * d];
        for (e, w) in embedding.iter_mut().zip(row) {
            *e += x * w;
        }
    }
    let logit = params.cls_bias + dot(&params.cls_weight, &embedding);
    Ok(MpOutput {
        embedding,
        logit,
        mean_input,
    })
}

/// Accumulates `dlogit * d(logit)/d(params)` into `grads`.
pub fn mp_backward(out: &MpOutput, params: &MeanPoolParams, dlogit: f64, grads: &mut MeanPoolParams) {
    let d = params.config.embed_dim;
    grads.cls_bias += dlogit;
    for (g, e) in grads.cls_weight.iter_mut().zip(&out.embedding) {
        *g += dlogit * e;
    }
    let de: Vec<f64> = params.cls_weight.iter().map(|c| dlogit * c).collect();
    for (g, v) in grads.proj_bias.iter_mut().zip(&de) {
        *g += v;
    }
    for (j, &x) in out.mean_input.iter().enumerate() {
        let row = &mut grads.proj_weight[j * d..(j + 1) * d];
        for (g, v) in row.iter_mut().zip(&de) {
            *g += x * v;
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
