// SPDX-License-Identifier: Apache-2.0

//! Independent oracles shared by the integration tests.

#![allow(dead_code)]

use cmprobe::actstore::ActivationTensor;
use cmprobe::heads::{init_params, loss_and_grad, Example, HeadConfig, HeadKind, HeadParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random head instance with every block (biases and layer weights included)
/// perturbed away from its initial value, plus a batch of inputs.
pub struct GradInstance {
    pub params: HeadParams,
    pub inputs: Vec<ActivationTensor>,
    pub targets: Vec<f64>,
}

pub fn random_instance(kind: HeadKind, seed: u64) -> GradInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_heads = rng.random_range(1..=2usize);
    let embed_dim = n_heads * rng.random_range(1..=8 / n_heads);
    let n_layers = rng.random_range(1..=4usize);
    let feat_dim = rng.random_range(1..=10usize);
    let config = HeadConfig::new(embed_dim, n_heads, n_layers, feat_dim);
    let mut params = init_params(config, kind, rng.random()).unwrap();
    let flat: Vec<f64> = params
        .to_flat()
        .into_iter()
        .map(|v| v + rng.random_range(-0.5..0.5))
        .collect();
    params.set_flat(&flat).unwrap();
    let input_layers = if kind == HeadKind::Mp { 1 } else { n_layers };
    let batch = rng.random_range(1..=3usize);
    let inputs = (0..batch)
        .map(|_| {
            let frames = rng.random_range(1..=7usize);
            let values = (0..input_layers * frames * feat_dim)
                .map(|_| rng.random_range(-2.0f32..2.0))
                .collect();
            ActivationTensor::new(input_layers, frames, feat_dim, values).unwrap()
        })
        .collect();
    let targets = (0..batch).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
    GradInstance { params, inputs, targets }
}

impl GradInstance {
    pub fn loss_at(&self, flat: &[f64]) -> f64 {
        let mut p = self.params.clone();
        p.set_flat(flat).unwrap();
        loss_and_grad(&self.batch(), &p).unwrap().0
    }

    pub fn batch(&self) -> Vec<Example<'_>> {
        self.inputs.iter().zip(&self.targets).map(|(x, &y)| Example::new(x, y)).collect()
    }
}

/// Central finite differences of the batch loss, one coordinate at a time.
pub fn finite_difference_grad(inst: &GradInstance, step: f64) -> Vec<f64> {
    let base = inst.params.to_flat();
    (0..base.len())
        .map(|i| {
            let mut plus = base.clone();
            let mut minus = base.clone();
            plus[i] += step;
            minus[i] -= step;
            (inst.loss_at(&plus) - inst.loss_at(&minus)) / (2.0 * step)
        })
        .collect()
}

/// EER by brute force: evaluate (FRR, FAR) just below and just above every
/// distinct score, then intersect the resulting polyline with FRR = FAR.
pub fn brute_force_eer(bona: &[f64], spoof: &[f64]) -> f64 {
    let mut all: Vec<f64> = bona.iter().chain(spoof).copied().collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    let min_gap = all
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::INFINITY, f64::min);
    let eps = if min_gap.is_finite() { min_gap / 4.0 } else { 1.0 };
    let rates = |thr: f64| {
        let frr = bona.iter().filter(|&&s| s < thr).count() as f64 / bona.len() as f64;
        let far = spoof.iter().filter(|&&s| s >= thr).count() as f64 / spoof.len() as f64;
        (frr, far)
    };
    let mut points = vec![(0.0, 1.0)];
    for &s in &all {
        points.push(rates(s - eps));
        points.push(rates(s + eps));
    }
    points.push((1.0, 0.0));
    points.dedup();
    for w in points.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        let d0 = x0 - y0;
        let d1 = x1 - y1;
        if d0 <= 0.0 && d1 >= 0.0 {
            if d1 == d0 {
                return x0;
            }
            // Segment (x0, y0) -> (x1, y1) meets x = y at parameter t.
            let t = -d0 / (d1 - d0);
            return x0 + t * (x1 - x0);
        }
    }
    unreachable!("the polyline runs from (0, 1) to (1, 0)")
}
