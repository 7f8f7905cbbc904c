// SPDX-License-Identifier: Apache-2.0

use super::mean_pool::dot;
use super::HeadConfig;
use crate::actstore::ActivationTensor;
use crate::error::{Error, Result};

/// Multi-head factorized attentive pooling parameters.
///
/// Matrices are row-major: `proj_k`/`proj_v` are `F x D`, `attn_weight` is
/// `D x H`.
#[derive(Debug, Clone, PartialEq)]
pub struct MhfaParams {
    pub config: HeadConfig,
    /// Raw key layer weights, one per stored layer (softmax-normalized in use).
    pub layer_w_k: Vec<f64>,
    /// Raw value layer weights.
    pub layer_w_v: Vec<f64>,
    pub proj_k: Vec<f64>,
    pub proj_k_bias: Vec<f64>,
    pub proj_v: Vec<f64>,
    pub proj_v_bias: Vec<f64>,
    pub attn_weight: Vec<f64>,
    pub attn_bias: Vec<f64>,
    pub cls_weight: Vec<f64>,
    pub cls_bias: f64,
}

impl MhfaParams {
    pub fn zeros(config: HeadConfig) -> Self {
        let (l, f, d, h) = (config.n_layers_in, config.feat_dim, config.embed_dim, config.n_heads);
        Self {
            config,
            layer_w_k: vec![0.0; l],
            layer_w_v: vec![0.0; l],
            proj_k: vec![0.0; f * d],
            proj_k_bias: vec![0.0; d],
            proj_v: vec![0.0; f * d],
            proj_v_bias: vec![0.0; d],
            attn_weight: vec![0.0; d * h],
            attn_bias: vec![0.0; h],
            cls_weight: vec![0.0; d],
            cls_bias: 0.0,
        }
    }

    pub fn blocks(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("layer_w_k", &self.layer_w_k),
            ("layer_w_v", &self.layer_w_v),
            ("proj_k", &self.proj_k),
            ("proj_k_bias", &self.proj_k_bias),
            ("proj_v", &self.proj_v),
            ("proj_v_bias", &self.proj_v_bias),
            ("attn_weight", &self.attn_weight),
            ("attn_bias", &self.attn_bias),
            ("cls_weight", &self.cls_weight),
            ("cls_bias", std::slice::from_ref(&self.cls_bias)),
        ]
    }

    pub fn blocks_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            ("layer_w_k", &mut self.layer_w_k),
            ("layer_w_v", &mut self.layer_w_v),
            ("proj_k", &mut self.proj_k),
            ("proj_k_bias", &mut self.proj_k_bias),
            ("proj_v", &mut self.proj_v),
            ("proj_v_bias", &mut self.proj_v_bias),
            ("attn_weight", &mut self.attn_weight),
            ("attn_bias", &mut self.attn_bias),
            ("cls_weight", &mut self.cls_weight),
            ("cls_bias", std::slice::from_mut(&mut self.cls_bias)),
        ]
    }

    /// Normalized key and value layer weights.
    pub fn normalized_layer_weights(&self) -> (Vec<f64>, Vec<f64>) {
        (softmax(&self.layer_w_k), softmax(&self.layer_w_v))
    }
}

/// Intermediate values of one MHFA forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct MhfaTrace {
    pub layer_weights_k: Vec<f64>,
    pub layer_weights_v: Vec<f64>,
    /// Layer-weighted inputs `sum_l w_l Z_l`, `T x F`.
    pub mixed_k: Vec<f64>,
    pub mixed_v: Vec<f64>,
    /// `T x D`.
    pub keys: Vec<f64>,
    pub vals: Vec<f64>,
    /// `T x H`; every column sums to one over frames.
    pub attn: Vec<f64>,
    pub embedding: Vec<f64>,
    pub logit: f64,
    pub n_frames: usize,
}

/// Numerically stable softmax.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn mix_layers(z: &ActivationTensor, weights: &[f64]) -> Vec<f64> {
    let mut mixed = vec![0.0; z.n_frames() * z.n_features()];
    for (l, &w) in weights.iter().enumerate() {
        for (m, &v) in mixed.iter_mut().zip(z.layer(l).values) {
            *m += w * v as f64;
        }
    }
    mixed
}

/// `(T x F) (F x D) + bias`.
fn project(x: &[f64], weight: &[f64], bias: &[f64], f: usize, d: usize) -> Vec<f64> {
    let t = x.len() / f;
    let mut out = Vec::with_capacity(t * d);
    for row in x.chunks_exact(f) {
        let start = out.len();
        out.extend_from_slice(bias);
        let acc = &mut out[start..];
        for (j, &xv) in row.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            for (a, w) in acc.iter_mut().zip(&weight[j * d..(j + 1) * d]) {
                *a += xv * w;
            }
        }
    }
    debug_assert_eq!(out.len(), t * d);
    out
}

pub fn mhfa_forward(z: &ActivationTensor, params: &MhfaParams) -> Result<MhfaTrace> {
    let c = params.config;
    let (f, d, h) = (c.feat_dim, c.embed_dim, c.n_heads);
    if z.n_layers() != c.n_layers_in {
        return Err(Error::ShapeMismatch(format!(
            "input has {} layers, head expects {}",
            z.n_layers(),
            c.n_layers_in
        )));
    }
    if z.n_features() != f {
        return Err(Error::ShapeMismatch(format!(
            "input has {} features, head expects {f}",
            z.n_features()
        )));
    }
    let t = z.n_frames();
    let chunk = c.chunk();

    let (wk, wv) = params.normalized_layer_weights();
    let mixed_k = mix_layers(z, &wk);
    let mixed_v = mix_layers(z, &wv);
    let keys = project(&mixed_k, &params.proj_k, &params.proj_k_bias, f, d);
    let vals = project(&mixed_v, &params.proj_v, &params.proj_v_bias, f, d);

    // Attention logits, T x H, then softmax over frames per head.
    let mut attn = project(&keys, &params.attn_weight, &params.attn_bias, d, h);
    for head in 0..h {
        let column: Vec<f64> = (0..t).map(|ti| attn[ti * h + head]).collect();
        for (ti, w) in softmax(&column).into_iter().enumerate() {
            attn[ti * h + head] = w;
        }
    }

    let mut embedding = vec![0.0; d];
    for ti in 0..t {
        for head in 0..h {
            let a = attn[ti * h + head];
            let span = head * chunk..(head + 1) * chunk;
            for (e, v) in embedding[span.clone()].iter_mut().zip(&vals[ti * d..][span]) {
                *e += a * v;
            }
        }
    }
    let logit = params.cls_bias + dot(&params.cls_weight, &embedding);
    Ok(MhfaTrace {
        layer_weights_k: wk,
        layer_weights_v: wv,
        mixed_k,
        mixed_v,
        keys,
        vals,
        attn,
        embedding,
        logit,
        n_frames: t,
    })
}

/// Gradient of a softmax input given the gradient of its output.
fn softmax_backward(y: &[f64], dy: &[f64]) -> Vec<f64> {
    let inner = dot(y, dy);
    y.iter().zip(dy).map(|(yi, gi)| yi * (gi - inner)).collect()
}

/// Backward through `y = x W + b` for `x: T x F`, `W: F x D`; returns dx.
fn project_backward(
    x: &[f64],
    weight: &[f64],
    dy: &[f64],
    f: usize,
    d: usize,
    dweight: &mut [f64],
    dbias: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; x.len()];
    for ((xrow, dyrow), dxrow) in x.chunks_exact(f).zip(dy.chunks_exact(d)).zip(dx.chunks_exact_mut(f)) {
        for (b, g) in dbias.iter_mut().zip(dyrow) {
            *b += g;
        }
        for j in 0..f {
            let wrow = &weight[j * d..(j + 1) * d];
            dxrow[j] = dot(wrow, dyrow);
            let xv = xrow[j];
            if xv != 0.0 {
                for (gw, g) in dweight[j * d..(j + 1) * d].iter_mut().zip(dyrow) {
                    *gw += xv * g;
                }
            }
        }
    }
    dx
}

/// Accumulates `dlogit * d(logit)/d(params)` into `grads`.
pub fn mhfa_backward(
    z: &ActivationTensor,
    trace: &MhfaTrace,
    params: &MhfaParams,
    dlogit: f64,
    grads: &mut MhfaParams,
) {
    let c = params.config;
    let (f, d, h) = (c.feat_dim, c.embed_dim, c.n_heads);
    let t = trace.n_frames;
    let chunk = c.chunk();

    grads.cls_bias += dlogit;
    for (g, e) in grads.cls_weight.iter_mut().zip(&trace.embedding) {
        *g += dlogit * e;
    }
    let de: Vec<f64> = params.cls_weight.iter().map(|w| dlogit * w).collect();

    // Pooling: e[chunk h] = sum_t attn[t, h] V[t, chunk h].
    let mut dvals = vec![0.0; t * d];
    let mut dattn = vec![0.0; t * h];
    for ti in 0..t {
        for head in 0..h {
            let span = head * chunk..(head + 1) * chunk;
            let a = trace.attn[ti * h + head];
            let v = &trace.vals[ti * d..][span.clone()];
            dattn[ti * h + head] = dot(v, &de[span.clone()]);
            for (dv, g) in dvals[ti * d..][span.clone()].iter_mut().zip(&de[span]) {
                *dv = a * g;
            }
        }
    }

    // Per-head softmax over frames.
    let mut dscores = vec![0.0; t * h];
    for head in 0..h {
        let y: Vec<f64> = (0..t).map(|ti| trace.attn[ti * h + head]).collect();
        let dy: Vec<f64> = (0..t).map(|ti| dattn[ti * h + head]).collect();
        for (ti, g) in softmax_backward(&y, &dy).into_iter().enumerate() {
            dscores[ti * h + head] = g;
        }
    }

    let dkeys = project_backward(
        &trace.keys,
        &params.attn_weight,
        &dscores,
        d,
        h,
        &mut grads.attn_weight,
        &mut grads.attn_bias,
    );
    let dmixed_k = project_backward(
        &trace.mixed_k,
        &params.proj_k,
        &dkeys,
        f,
        d,
        &mut grads.proj_k,
        &mut grads.proj_k_bias,
    );
    let dmixed_v = project_backward(
        &trace.mixed_v,
        &params.proj_v,
        &dvals,
        f,
        d,
        &mut grads.proj_v,
        &mut grads.proj_v_bias,
    );

    // Layer mixing: d w_hat_l = <Z_l, d mixed>, then through the softmax.
    for (dmixed, weights, raw_grad) in [
        (&dmixed_k, &trace.layer_weights_k, &mut grads.layer_w_k),
        (&dmixed_v, &trace.layer_weights_v, &mut grads.layer_w_v),
    ] {
        let dw: Vec<f64> = (0..c.n_layers_in)
            .map(|l| {
                z.layer(l)
                    .values
                    .iter()
                    .zip(dmixed.iter())
                    .map(|(&zv, g)| zv as f64 * g)
                    .sum()
            })
            .collect();
        for (g, v) in raw_grad.iter_mut().zip(softmax_backward(weights, &dw)) {
            *g += v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(l: usize, t: usize, f: usize, values: &[f32]) -> ActivationTensor {
        ActivationTensor::new(l, t, f, values.to_vec()).unwrap()
    }

    fn hand_params() -> MhfaParams {
        // L + 1 = 2, F = 2, D = 2, H = 1.
        MhfaParams {
            config: HeadConfig::new(2, 1, 2, 2),
            layer_w_k: vec![0.0, 3f64.ln()],
            layer_w_v: vec![0.0, 0.0],
            proj_k: vec![1.0, 0.0, 0.0, 1.0],
            proj_k_bias: vec![0.0, 0.0],
            proj_v: vec![1.0, 2.0, -1.0, 1.0],
            proj_v_bias: vec![1.0, 0.0],
            attn_weight: vec![1.0, 1.0],
            attn_bias: vec![0.5],
            cls_weight: vec![1.0, -1.0],
            cls_bias: 0.25,
        }
    }

    #[test]
    fn hand_evaluated_trace() {
        // Z0 = [[1, 0], [0, 2]], Z1 = [[3, 1], [1, 1]].
        let z = tensor(2, 2, 2, &[1.0, 0.0, 0.0, 2.0, 3.0, 1.0, 1.0, 1.0]);
        let tr = mhfa_forward(&z, &hand_params()).unwrap();
        // w_k = softmax([0, ln 3]) = [1/4, 3/4]; w_v = [1/2, 1/2].
        assert!((tr.layer_weights_k[1] - 0.75).abs() < 1e-15);
        // mixed_k = 1/4 Z0 + 3/4 Z1 = [[2.5, 0.75], [0.75, 1.25]] and S^k = I.
        let expect_keys = [2.5, 0.75, 0.75, 1.25];
        for (a, b) in tr.keys.iter().zip(expect_keys) {
            assert!((a - b).abs() < 1e-15);
        }
        // mixed_v = [[2, 0.5], [0.5, 1.5]];
        // V = mixed_v [[1, 2], [-1, 1]] + [1, 0] = [[2.5, 4.5], [0, 2.5]].
        let expect_vals = [2.5, 4.5, 0.0, 2.5];
        for (a, b) in tr.vals.iter().zip(expect_vals) {
            assert!((a - b).abs() < 1e-15);
        }
        // scores = K [1, 1] + 0.5 = [3.75, 2.5]; attn = softmax.
        let a0 = 1.0 / (1.0 + (-1.25f64).exp());
        assert!((tr.attn[0] - a0).abs() < 1e-15);
        assert!((tr.attn[0] + tr.attn[1] - 1.0).abs() < 1e-15);
        // e = a0 V0 + a1 V1; logit = e0 - e1 + 0.25.
        let a1 = 1.0 - a0;
        let e = [a0 * 2.5 + a1 * 0.0, a0 * 4.5 + a1 * 2.5];
        assert!((tr.embedding[0] - e[0]).abs() < 1e-14);
        assert!((tr.embedding[1] - e[1]).abs() < 1e-14);
        assert!((tr.logit - (e[0] - e[1] + 0.25)).abs() < 1e-14);
    }

    #[test]
    fn single_frame_attention_is_one() {
        let z = tensor(2, 1, 2, &[0.3, -1.0, 2.0, 0.5]);
        let tr = mhfa_forward(&z, &hand_params()).unwrap();
        assert_eq!(tr.attn, vec![1.0]);
        assert_eq!(tr.embedding, tr.vals[..2].to_vec());
    }

    #[test]
    fn zero_raw_weights_are_uniform() {
        let p = MhfaParams::zeros(HeadConfig::new(4, 2, 5, 3));
        let (k, v) = p.normalized_layer_weights();
        assert!(k.iter().chain(&v).all(|&w| (w - 0.2).abs() < 1e-15));
    }

    #[test]
    fn layer_count_mismatch() {
        let z = tensor(3, 1, 2, &[0.0; 6]);
        assert!(matches!(mhfa_forward(&z, &hand_params()), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn softmax_is_stable() {
        let s = softmax(&[1000.0, 1000.0, -1000.0]);
        assert_eq!(s[2], 0.0);
        assert!((s[0] - 0.5).abs() < 1e-15);
    }
}
