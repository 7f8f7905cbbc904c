// SPDX-License-Identifier: Apache-2.0

use rayon::prelude::*;

use super::{mhfa_backward, mhfa_forward, mp_backward, mp_forward, HeadParams};
use crate::actstore::ActivationTensor;
use crate::error::{Error, Result};

/// One training item: a prepared input (single layer for MP, all layers for
/// MHFA), a target (1 = bona fide) and a loss weight.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub input: &'a ActivationTensor,
    pub target: f64,
    pub weight: f64,
}

impl<'a> Example<'a> {
    pub fn new(input: &'a ActivationTensor, target: f64) -> Self {
        Self {
            input,
            target,
            weight: 1.0,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Binary cross-entropy of a logit against `target`, and its derivative.
///
/// Hard targets use forms that are exact mirrors of each other:
/// `(-z, 1 - y)` gives the same loss and the negated derivative of `(z, y)`.
pub fn bce_with_logits(logit: f64, target: f64) -> (f64, f64) {
    if target == 1.0 {
        (softplus(-logit), -sigmoid(-logit))
    } else if target == 0.0 {
        (softplus(logit), sigmoid(logit))
    } else {
        (softplus(logit) - logit * target, sigmoid(logit) - target)
    }
}

fn item_loss_and_grad(example: &Example<'_>, params: &HeadParams) -> Result<(f64, HeadParams)> {
    let mut grads = params.zeros_like();
    let loss = match (params, &mut grads) {
        (HeadParams::MeanPool(p), HeadParams::MeanPool(g)) => {
            if example.input.n_layers() != 1 {
                return Err(Error::ShapeMismatch(format!(
                    "mean pooling expects a single-layer input, got {} layers",
                    example.input.n_layers()
                )));
            }
            let out = mp_forward(example.input.layer(0), p)?;
            let (loss, dlogit) = bce_with_logits(out.logit, example.target);
            mp_backward(&out, p, example.weight * dlogit, g);
            loss
        }
        (HeadParams::Mhfa(p), HeadParams::Mhfa(g)) => {
            let trace = mhfa_forward(example.input, p)?;
            let (loss, dlogit) = bce_with_logits(trace.logit, example.target);
            mhfa_backward(example.input, &trace, p, example.weight * dlogit, g);
            loss
        }
        _ => unreachable!("zeros_like keeps the head kind"),
    };
    Ok((example.weight * loss, grads))
}

/// Mean weighted BCE over `batch` and its exact gradient.
///
/// Items are evaluated in parallel and reduced in batch order, so the result
/// does not depend on the thread count.
pub fn loss_and_grad(batch: &[Example<'_>], params: &HeadParams) -> Result<(f64, HeadParams)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let items: Vec<(f64, HeadParams)> = batch
        .par_iter()
        .map(|ex| item_loss_and_grad(ex, params))
        .collect::<Result<_>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut total = params.zeros_like();
    let mut loss = 0.0;
    for (item_loss, grads) in &items {
        loss += item_loss;
        for ((_, acc), (_, g)) in total.blocks_mut().into_iter().zip(grads.blocks()) {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
    }
    loss *= scale;
    for (_, block) in total.blocks_mut() {
        block.iter_mut().for_each(|v| *v *= scale);
    }
    if !loss.is_finite() {
        return Err(Error::NonFiniteGradient { block: "loss" });
    }
    if let Some(block) = total.first_non_finite() {
        return Err(Error::NonFiniteGradient { block });
    }
    Ok((loss, total))
}
