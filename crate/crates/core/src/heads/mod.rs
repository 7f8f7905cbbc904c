// SPDX-License-Identifier: Apache-2.0

//! Classification heads over frozen activations.
//!
//! Two heads are provided, both producing a single detection logit (higher =
//! more bona fide):
//!
//! - mean pooling (MP) on one layer: frame-wise linear projection to `D`,
//!   temporal average, scalar classifier;
//! - multi-head factorized attentive pooling (MHFA) over all layers: softmax
//!   layer weights build key and value inputs, `H` attention heads pool
//!   disjoint `D / H` chunks of the values, and the concatenated chunks feed
//!   the scalar classifier.
//!
//! Forward passes, analytic gradients and parameter counts are exact; all
//! arithmetic is done in `f64`.

mod checkpoint;
mod loss;
mod mean_pool;
mod mhfa;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::actstore::ActivationTensor;
use crate::error::{Error, Result};
use crate::seeds;

pub use checkpoint::{head_from_bytes, head_to_bytes, read_head, write_head, HEAD_HEADER_LEN, HEAD_MAGIC, HEAD_VERSION};
pub use loss::{bce_with_logits, loss_and_grad, Example};
pub use mean_pool::{mean_frame, mp_backward, mp_forward, MeanPoolParams, MpOutput};
pub use mhfa::{mhfa_backward, mhfa_forward, softmax, MhfaParams, MhfaTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Mp,
    Mhfa,
}

impl HeadKind {
    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::Mp => "mp",
            HeadKind::Mhfa => "mhfa",
        }
    }
}

impl std::str::FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mp" => Ok(HeadKind::Mp),
            "mhfa" => Ok(HeadKind::Mhfa),
            other => Err(Error::InvalidConfig(format!("unknown head kind {other:?}"))),
        }
    }
}

/// Shape of a head: embedding size `D`, attention heads `H`, stored layers
/// `L + 1` and feature size `F`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub embed_dim: usize,
    pub n_heads: usize,
    pub n_layers_in: usize,
    pub feat_dim: usize,
}

impl HeadConfig {
    pub fn new(embed_dim: usize, n_heads: usize, n_layers_in: usize, feat_dim: usize) -> Self {
        Self {
            embed_dim,
            n_heads,
            n_layers_in,
            feat_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.n_heads == 0 || self.n_layers_in == 0 || self.feat_dim == 0 {
            return Err(Error::InvalidConfig(format!("head dimensions must be >= 1: {self:?}")));
        }
        if self.embed_dim % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "embed_dim {} is not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        Ok(())
    }

    /// Size of one value chunk pooled by each attention head.
    pub fn chunk(&self) -> usize {
        self.embed_dim / self.n_heads
    }
}

/// Exact number of trainable scalars of a head.
pub fn head_param_count(config: &HeadConfig, kind: HeadKind) -> usize {
    let (f, d, h, l) = (config.feat_dim, config.embed_dim, config.n_heads, config.n_layers_in);
    match kind {
        HeadKind::Mp => f * d + d + d + 1,
        HeadKind::Mhfa => 2 * l + 2 * (f * d + d) + d * h + h + d + 1,
    }
}

/// Trainable parameters of either head.
#[derive(Debug, Clone, PartialEq)]
pub enum HeadParams {
    MeanPool(MeanPoolParams),
    Mhfa(MhfaParams),
}

impl HeadParams {
    pub fn kind(&self) -> HeadKind {
        match self {
            HeadParams::MeanPool(_) => HeadKind::Mp,
            HeadParams::Mhfa(_) => HeadKind::Mhfa,
        }
    }

    pub fn config(&self) -> HeadConfig {
        match self {
            HeadParams::MeanPool(p) => p.config,
            HeadParams::Mhfa(p) => p.config,
        }
    }

    /// Zero-valued parameters of the same shape.
    pub fn zeros(config: HeadConfig, kind: HeadKind) -> Self {
        match kind {
            HeadKind::Mp => HeadParams::MeanPool(MeanPoolParams::zeros(config)),
            HeadKind::Mhfa => HeadParams::Mhfa(MhfaParams::zeros(config)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config(), self.kind())
    }

    /// Named parameter blocks in declaration order.
    pub fn blocks(&self) -> Vec<(&'static str, &[f64])> {
        match self {
            HeadParams::MeanPool(p) => p.blocks(),
            HeadParams::Mhfa(p) => p.blocks(),
        }
    }

    pub fn blocks_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        match self {
            HeadParams::MeanPool(p) => p.blocks_mut(),
            HeadParams::Mhfa(p) => p.blocks_mut(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.blocks().into_iter().flat_map(|(_, b)| b.iter().copied()).collect()
    }

    /// Overwrites every parameter from a flat vector in block order.
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::ShapeMismatch(format!(
                "flat vector has {} values, parameters need {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut offset = 0;
        for (_, block) in self.blocks_mut() {
            block.copy_from_slice(&flat[offset..offset + block.len()]);
            offset += block.len();
        }
        Ok(())
    }

    /// First block holding a non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.blocks()
            .into_iter()
            .find(|(_, b)| b.iter().any(|v| !v.is_finite()))
            .map(|(name, _)| name)
    }

    /// Flips the sign of the classifier, negating every logit.
    pub fn negate_classifier(&mut self) {
        let (w, b) = match self {
            HeadParams::MeanPool(p) => (&mut p.cls_weight, &mut p.cls_bias),
            HeadParams::Mhfa(p) => (&mut p.cls_weight, &mut p.cls_bias),
        };
        w.iter_mut().for_each(|v| *v = -*v);
        *b = -*b;
    }

    pub fn as_mhfa(&self) -> Result<&MhfaParams> {
        match self {
            HeadParams::Mhfa(p) => Ok(p),
            HeadParams::MeanPool(_) => Err(Error::WrongHeadKind {
                expected: "mhfa",
                found: "mp",
            }),
        }
    }

    /// Logit of one prepared input (one layer for MP, all layers for MHFA).
    pub fn logit(&self, input: &ActivationTensor) -> Result<f64> {
        match self {
            HeadParams::MeanPool(p) => {
                if input.n_layers() != 1 {
                    return Err(Error::ShapeMismatch(format!(
                        "mean pooling expects a single-layer input, got {} layers",
                        input.n_layers()
                    )));
                }
                Ok(mp_forward(input.layer(0), p)?.logit)
            }
            HeadParams::Mhfa(p) => Ok(mhfa_forward(input, p)?.logit),
        }
    }
}

/// Glorot-uniform bound for a `fan_in x fan_out` matrix.
fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn fill_uniform<R: Rng>(rng: &mut R, block: &mut [f64], bound: f64) {
    for v in block {
        *v = rng.random_range(-bound..=bound);
    }
}

/// Fresh parameters: matrices uniform in `±sqrt(6 / (fan_in + fan_out))`,
/// biases and raw layer weights zero.
pub fn init_params(config: HeadConfig, kind: HeadKind, seed: u64) -> Result<HeadParams> {
    config.validate()?;
    let mut rng = seeds::stream(seed, &format!("init/{}", kind.as_str()), &[]);
    let (f, d, h) = (config.feat_dim, config.embed_dim, config.n_heads);
    let mut params = HeadParams::zeros(config, kind);
    match &mut params {
        HeadParams::MeanPool(p) => {
            fill_uniform(&mut rng, &mut p.proj_weight, glorot_bound(f, d));
            fill_uniform(&mut rng, &mut p.cls_weight, glorot_bound(d, 1));
        }
        HeadParams::Mhfa(p) => {
            fill_uniform(&mut rng, &mut p.proj_k, glorot_bound(f, d));
            fill_uniform(&mut rng, &mut p.proj_v, glorot_bound(f, d));
            fill_uniform(&mut rng, &mut p.attn_weight, glorot_bound(d, h));
            fill_uniform(&mut rng, &mut p.cls_weight, glorot_bound(d, 1));
        }
    }
    Ok(params)
}

/// Which stored layers a head reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerSelector {
    All,
    Single(usize),
}

impl LayerSelector {
    pub fn layers(self, n_layers: usize) -> Vec<usize> {
        match self {
            LayerSelector::All => (0..n_layers).collect(),
            LayerSelector::Single(l) => vec![l],
        }
    }
}

/// A trained head together with the layers it reads; the unit stored in
/// checkpoint files.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub input: LayerSelector,
    pub params: HeadParams,
}

impl Head {
    pub fn new(input: LayerSelector, params: HeadParams) -> Result<Self> {
        let config = params.config();
        match (params.kind(), input) {
            (HeadKind::Mp, LayerSelector::Single(l)) if l < config.n_layers_in => {}
            (HeadKind::Mhfa, LayerSelector::All) => {}
            (kind, input) => {
                return Err(Error::InvalidConfig(format!(
                    "{} head cannot read {input:?} of {} layers",
                    kind.as_str(),
                    config.n_layers_in
                )))
            }
        }
        Ok(Self { input, params })
    }

    /// Restricts a backbone tensor to the layers this head reads.
    pub fn prepare(&self, tensor: &ActivationTensor) -> Result<ActivationTensor> {
        self.check_shape(tensor)?;
        match self.input {
            LayerSelector::All => Ok(tensor.clone()),
            LayerSelector::Single(l) => {
                let frames: Vec<usize> = (0..tensor.n_frames()).collect();
                tensor.gather(&[l], &frames)
            }
        }
    }

    /// Detection logit on a full backbone tensor.
    pub fn logit(&self, tensor: &ActivationTensor) -> Result<f64> {
        self.check_shape(tensor)?;
        match (self.input, &self.params) {
            (LayerSelector::Single(l), HeadParams::MeanPool(p)) => Ok(mp_forward(tensor.layer(l), p)?.logit),
            (_, HeadParams::Mhfa(p)) => Ok(mhfa_forward(tensor, p)?.logit),
            _ => unreachable!("Head::new pairs MP with a single layer"),
        }
    }

    fn check_shape(&self, tensor: &ActivationTensor) -> Result<()> {
        let config = self.params.config();
        if tensor.n_layers() != config.n_layers_in || tensor.n_features() != config.feat_dim {
            return Err(Error::ShapeMismatch(format!(
                "tensor is {} layers x {} features, head expects {} x {}",
                tensor.n_layers(),
                tensor.n_features(),
                config.n_layers_in,
                config.feat_dim
            )));
        }
        Ok(())
    }
}
